//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single PASS/FAIL line to stderr (uncaptured) before asserting.
//!
//! The two training criteria read CIFAR-10 from `CIFAR10_DIR` when it is
//! set and otherwise use the synthetic ten-class set in the same format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use dualmim::autodiff::{ParamStore, Tensor};
use dualmim::data::cifar::{load_cifar10, load_split, parse_cifar10, ImageRecord, Split};
use dualmim::data::synth::generate;
use dualmim::gradcheck::{run_suite, tiny_config};
use dualmim::masking::{gen_mask, split_folds, MaskingConfig};
use dualmim::pseudo_label::{nearest_patch_match, sinkhorn_normalize};
use dualmim::rng::stream;
use dualmim::teachers::{ema_update, EmaFrequency, EmaSchedule};
use dualmim::train::run::{probe_encoder, random_encoder};
use dualmim::train::{pretrain, Checkpoint, PretrainOptions, TeacherMode, TrainConfig, Trainer};
use dualmim::Error;
use rand::Rng;

/// The long runs share one core; timing them concurrently would be unfair.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("[{n}] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn desk_config(overrides: &[(&str, &str)]) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let ov: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    TrainConfig::load(Some(&path), &ov).unwrap()
}

/// `(train, test)` records: CIFAR-10 when available, synthetic otherwise.
fn dataset(train: usize, test: usize) -> (Vec<ImageRecord>, Vec<ImageRecord>, &'static str) {
    if let Some(dir) = std::env::var_os("CIFAR10_DIR") {
        let dir = PathBuf::from(dir);
        let mut tr = load_split(&dir, Split::Train).unwrap();
        let mut te = load_split(&dir, Split::Test).unwrap();
        tr.truncate(train);
        te.truncate(test);
        return (tr, te, "CIFAR-10");
    }
    (generate(train, 0), generate(test, 1), "synthetic")
}

fn flat(s: &ParamStore) -> Vec<u32> {
    s.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn c1_gradient_suite() {
    let cfg = tiny_config(0);
    assert_eq!((cfg.model.num_patches(), cfg.model.embed_dim, cfg.head.output_dim), (16, 8, 8));
    let start = Instant::now();
    let reports = run_suite(0).unwrap();
    let took = start.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let worst = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let composite = reports.iter().find(|r| r.name.starts_with("composite")).expect("composite check");
    let pass = failed.is_empty() && took < Duration::from_secs(120) && composite.checked > 0;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} checks, {} failed, worst rel err {worst:.2e}, composite {} elements, {:.1}s",
            reports.len(),
            failed.len(),
            composite.checked,
            took.as_secs_f64()
        ),
    );
    assert!(pass, "{failed:?} in {took:?}");
}

/// Alternating column/row normalization in f64, written independently.
fn sinkhorn_oracle(scores: &[f64], rows: usize, cols: usize, temp: f64, iters: usize) -> Vec<f64> {
    let mut q: Vec<f64> = scores.iter().map(|s| (s / temp).exp()).collect();
    for _ in 0..iters {
        for c in 0..cols {
            let s: f64 = (0..rows).map(|r| q[r * cols + c]).sum();
            for r in 0..rows {
                q[r * cols + c] *= rows as f64 / cols as f64 / s;
            }
        }
        for r in 0..rows {
            let s: f64 = q[r * cols..(r + 1) * cols].iter().sum();
            q[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= s);
        }
    }
    q
}

#[test]
fn c2_sinkhorn() {
    let mut rng = stream(2, &[]);
    let mut worst_row = 0.0f64;
    for case in 0..60 {
        let rows = rng.random_range(1..40);
        let cols = rng.random_range(2..64);
        let iters = case % 6;
        let scale = [0.01f32, 1.0, 10.0][case % 3];
        let scores: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        let q = sinkhorn_normalize(&scores, rows, cols, iters, 0.05).unwrap();
        for r in q.chunks_exact(cols) {
            worst_row = worst_row.max((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }

    let mut worst_fixed = 0.0f64;
    for case in 0..20 {
        let temp = if case % 2 == 0 { 1.0 } else { 0.05 };
        let scores: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0f32..1.0) * temp).collect();
        let ours = sinkhorn_normalize(&scores, 2, 2, 1000, temp).unwrap();
        let s64: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let oracle = sinkhorn_oracle(&s64, 2, 2, temp as f64, 1000);
        for (a, b) in ours.iter().zip(&oracle) {
            worst_fixed = worst_fixed.max((*a as f64 - b).abs());
        }
    }

    let mut worst_uniform = 0.0f64;
    for (rows, cols, v) in [(7, 5, 0.0f32), (32, 1024, 3.25), (1, 8, -2.0), (64, 64, 0.5)] {
        for iters in [0, 1, 3] {
            let q = sinkhorn_normalize(&vec![v; rows * cols], rows, cols, iters, 0.05).unwrap();
            for x in q {
                worst_uniform = worst_uniform.max((x as f64 - 1.0 / cols as f64).abs());
            }
        }
    }
    let pass = worst_row <= 1e-5 && worst_fixed <= 1e-4 && worst_uniform <= 1e-7;
    report(
        2,
        "sinkhorn",
        pass,
        &format!("row-sum err {worst_row:.1e}, 2x2 fixed point err {worst_fixed:.1e}, uniform err {worst_uniform:.1e}"),
    );
    assert!(pass);
}

#[test]
fn c3_fold_arithmetic() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (n, k, want) in [(196, 3, 49), (64, 3, 16)] {
        for seed in 0..20 {
            let mut rng = stream(seed, &[n as u64]);
            let mask = gen_mask(n, 0.75, &mut rng).unwrap();
            let folds = split_folds(&mask, k, &mut rng).unwrap();
            let mut all: Vec<usize> = folds.folds.iter().flatten().copied().collect();
            all.sort_unstable();
            ok &= mask.visible.len() == want
                && folds.folds.len() == k
                && folds.folds.iter().all(|f| f.len() == want)
                && all == mask.masked;
        }
        detail.push(format!("N={n}: {want} visible, {k}x{want}"));
    }
    let bad = MaskingConfig { ratio: 0.75, folds: 5 }.validate(64);
    let via_config = TrainConfig::load(None, &[("masking.folds".into(), "5".into())]);
    let odd_ratio = TrainConfig::load(None, &[("masking.ratio".into(), "0.5".into())]);
    ok &= matches!(bad, Err(Error::Config(_)))
        && matches!(via_config, Err(Error::Config(_)))
        && matches!(odd_ratio, Err(Error::Config(_)));
    detail.push("non-divisible rejected at config time".into());
    report(3, "fold arithmetic", ok, &detail.join(", "));
    assert!(ok);
}

#[test]
fn c4_ema() {
    let rec = EmaSchedule::reconstruction();
    let cl = EmaSchedule::pseudo_labeling();
    let ends = [
        rec.momentum_at(0, 19).unwrap(),
        rec.momentum_at(19, 19).unwrap(),
        cl.momentum_at(0, 999).unwrap(),
        cl.momentum_at(999, 999).unwrap(),
    ];
    let endpoints = ends == [0.96, 0.99, 0.996, 1.0]
        && rec.frequency == EmaFrequency::PerEpoch
        && cl.frequency == EmaFrequency::PerIteration;

    let mut rng = stream(4, &[]);
    let mut store = || {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        s.insert("b", Tensor::new(vec![7], (0..7).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        s
    };
    let student = store();
    let teacher0 = store();
    let mut t = teacher0.clone();
    ema_update(&mut t, &student, 1.0).unwrap();
    let identity = flat(&t) == flat(&teacher0);
    ema_update(&mut t, &student, 0.0).unwrap();
    let copy = flat(&t) == flat(&student);

    // dyadic values make every intermediate exact in f32
    let mut geometric = true;
    for (m, s, t0) in [(0.5f64, 1.0f32, 0.0f32), (0.75, -2.0, 6.0), (0.25, 0.5, -1.5)] {
        let mut st = ParamStore::new();
        st.insert("w", Tensor::new(vec![1], vec![s]).unwrap());
        let mut te = ParamStore::new();
        te.insert("w", Tensor::new(vec![1], vec![t0]).unwrap());
        for n in 1..=12 {
            ema_update(&mut te, &st, m).unwrap();
            let want = s as f64 + m.powi(n) * (t0 as f64 - s as f64);
            geometric &= te.iter().next().unwrap().2.data()[0] as f64 == want;
        }
    }
    let pass = endpoints && identity && copy && geometric;
    report(
        4,
        "ema",
        pass,
        &format!("endpoints {ends:?}, m=1 identity {identity}, m=0 copy {copy}, geometric law {geometric}"),
    );
    assert!(pass);
}

/// Exhaustive search with distance `|a/|a| - b/|b||^2 / 2`, sorted on
/// `(distance, fold, row)`.
fn match_oracle(student: &[f32], folds: &[Vec<f32>], d: usize) -> Vec<(usize, usize)> {
    let unit = |r: &[f32]| -> Option<Vec<f64>> {
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        (n > 0.0).then(|| r.iter().map(|&v| v as f64 / n).collect())
    };
    student
        .chunks_exact(d)
        .map(|s| {
            let su = unit(s);
            let mut all = Vec::new();
            for (k, f) in folds.iter().enumerate() {
                for (i, t) in f.chunks_exact(d).enumerate() {
                    let dist = match (&su, unit(t)) {
                        (Some(a), Some(b)) => a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 2.0,
                        _ => 1.0,
                    };
                    all.push((dist, k, i));
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (all[0].1, all[0].2)
        })
        .collect()
}

#[test]
fn c5_matching_oracle() {
    let mut rng = stream(5, &[]);
    let (mut agree, mut ties) = (0, 0);
    let total = 200;
    for case in 0..total {
        let m = rng.random_range(1..=16);
        let k = rng.random_range(1..=3);
        let f = rng.random_range(1..=8);
        let d = rng.random_range(1..=32);
        let mut folds: Vec<Vec<f32>> = (0..k)
            .map(|_| (0..f * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut student: Vec<f32> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if case % 2 == 0 {
            // duplicate a teacher row into a later position and aim a student row at it
            let (src_k, src_r) = (rng.random_range(0..k), rng.random_range(0..f));
            let row = folds[src_k][src_r * d..(src_r + 1) * d].to_vec();
            let (dst_k, dst_r) = (k - 1, f - 1);
            folds[dst_k][dst_r * d..(dst_r + 1) * d].copy_from_slice(&row);
            let at = rng.random_range(0..m);
            student[at * d..(at + 1) * d].copy_from_slice(&row);
            ties += 1;
        }
        if case % 7 == 0 {
            student[..d].iter_mut().for_each(|v| *v = 0.0);
        }
        let refs: Vec<&[f32]> = folds.iter().map(Vec::as_slice).collect();
        let got = nearest_patch_match(&student, &refs, d).unwrap().chosen;
        if got == match_oracle(&student, &folds, d) {
            agree += 1;
        }
    }
    let pass = agree == total;
    report(5, "matching oracle", pass, &format!("{agree}/{total} instances agree, {ties} with forced ties"));
    assert!(pass);
}

#[test]
fn c6_training_descent() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = desk_config(&[("optim.max_iters", "200")]);
    let (records, _, source) = dataset(2000, 0);
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = pretrain(&cfg, &records, dir.path(), &PretrainOptions::default()).unwrap();
    let took = start.elapsed();
    let mean = |lo: u64, hi: u64| {
        let v: Vec<f64> = out.rows.iter().filter(|r| (lo..=hi).contains(&r.iter)).map(|r| r.total as f64).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (early, late) = (mean(1, 50), mean(150, 200));
    let floor = 0.1 * (cfg.head.output_dim as f64).ln();
    let min_entropy = out.rows.iter().map(|r| r.patch_entropy).fold(f64::INFINITY, f64::min);
    let pass = out.rows.len() == 200 && late <= 0.85 * early && min_entropy >= floor && took < Duration::from_secs(600);
    report(
        6,
        "training descent",
        pass,
        &format!(
            "{source}, mean total {early:.4} -> {late:.4} ({:+.1}%), min patch entropy {min_entropy:.3} vs floor {floor:.3}, {:.0}s",
            100.0 * (late / early - 1.0),
            took.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c7_representation_sanity() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = desk_config(&[("optim.epochs", "5"), ("optim.warmup_epochs", "1")]);
    let (train, test, source) = dataset(10_000, 2_000);
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = pretrain(&cfg, &train, dir.path(), &PretrainOptions::default()).unwrap();
    let enc = &out.trainer.student.encoder;
    let pre = probe_encoder(&cfg, enc, &out.trainer.student.enc, &train, &test).unwrap();
    let (renc, rstore) = random_encoder(&cfg);
    let rand = probe_encoder(&cfg, &renc, &rstore, &train, &test).unwrap();
    let took = start.elapsed();
    let gain = pre.test_acc - rand.test_acc;
    let pass = gain >= 0.05 && pre.test_acc > 0.20 && took < Duration::from_secs(2400);
    report(
        7,
        "representation sanity",
        pass,
        &format!(
            "{source}, probe top-1 pretrained {:.3} vs random init {:.3} ({:+.1} points), {:.0}s",
            pre.test_acc,
            rand.test_acc,
            100.0 * gain,
            took.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn run_steps(cfg: &TrainConfig, branch: bool, records: &[ImageRecord]) -> (Trainer, Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        pseudo_branch: Some(branch),
        ..Default::default()
    };
    let out = pretrain(cfg, records, dir.path(), &opts).unwrap();
    let rows = out.rows.iter().map(|r| r.without_time()).collect();
    (out.trainer, rows)
}

#[test]
fn c8_ablation_structure() {
    let records = generate(48, 8);
    let mut cfg = TrainConfig::smoke();
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 2;
    cfg.loss.lambda_c = 0.0;
    cfg.loss.lambda_p = 0.0;
    let (with, rows_with) = run_steps(&cfg, true, &records);
    let (without, rows_without) = run_steps(&cfg, false, &records);
    let zero_terms = with.cfg.loss.lambda_c == 0.0
        && rows_with.iter().all(|r| {
            let f: Vec<&str> = r.split(',').collect();
            f[3].parse::<f64>().unwrap() == 0.0 && f[4].parse::<f64>().unwrap() == 0.0
        });
    // m_cl is only defined when the pseudo-labelling teacher exists
    let drop_m_cl = |rows: &[String]| -> Vec<String> {
        rows.iter()
            .map(|r| r.split(',').enumerate().filter(|(i, _)| *i != 9).map(|(_, f)| f).collect::<Vec<_>>().join(","))
            .collect()
    };
    let parity = drop_m_cl(&rows_with) == drop_m_cl(&rows_without)
        && flat(&with.student.enc) == flat(&without.student.enc)
        && flat(&with.student.dec) == flat(&without.student.dec)
        && flat(with.teachers.rec_encoder()) == flat(without.teachers.rec_encoder());

    let mut cfg = TrainConfig::smoke();
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 3;
    let shared = EmaSchedule::reconstruction();
    cfg.teachers.reconstruction = shared.clone();
    cfg.teachers.pseudo_labeling = shared.clone();
    cfg.teachers.single = shared;
    let (dual, rows_dual) = run_steps(&cfg, true, &records);
    cfg.teachers.mode = TeacherMode::Single;
    let (single, rows_single) = run_steps(&cfg, true, &records);
    let (cl_enc, cl_head) = dual.teachers.cl().unwrap();
    let (s_enc, s_head) = single.teachers.cl().unwrap();
    let single_teacher = rows_dual == rows_single
        && flat(dual.teachers.rec_encoder()) == flat(cl_enc)
        && flat(cl_enc) == flat(s_enc)
        && flat(cl_head) == flat(s_head)
        && flat(&dual.student.enc) == flat(&single.student.enc);
    let pass = zero_terms && parity && single_teacher;
    report(
        8,
        "ablation structure",
        pass,
        &format!(
            "loss_c=loss_p=0 {zero_terms}, no-branch parity {parity} over {} iters, single==dual {single_teacher} over {} iters",
            rows_with.len(),
            rows_dual.len()
        ),
    );
    assert!(pass);
}

fn metrics_without_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string())
        .collect()
}

#[test]
fn c9_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate(40, 9);
    let mut cfg = TrainConfig::smoke();
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 3;

    // save -> load -> save
    let ck = Trainer::new(&cfg, records.len(), true).unwrap().to_checkpoint();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let roundtrip = fs::read(&p1).unwrap() == fs::read(&p2).unwrap();

    // interrupted after one epoch vs straight through
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let straight = pretrain(&cfg, &records, &full, &PretrainOptions::default()).unwrap();
    let first = pretrain(
        &cfg,
        &records,
        &part,
        &PretrainOptions {
            stop_after_epochs: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let resumed = pretrain(
        &cfg,
        &records,
        &part,
        &PretrainOptions {
            resume: Some(first.checkpoint.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let resume_ok = metrics_without_time(&full.join("metrics.csv")) == metrics_without_time(&part.join("metrics.csv"))
        && fs::read(&straight.checkpoint).unwrap() == fs::read(&resumed.checkpoint).unwrap();

    // malformed reader input
    let good = dualmim::data::cifar::encode_cifar10(&generate(3, 0));
    let truncated = &good[..2 * 3073 + 100];
    let msg = |r: dualmim::Result<Vec<ImageRecord>>| r.err().map(|e| e.to_string()).unwrap_or_default();
    let trunc_msg = msg(parse_cifar10(truncated, Path::new("t.bin")));
    let mut bad_label = good.clone();
    bad_label[3073] = 10;
    let label_msg = msg(parse_cifar10(&bad_label, Path::new("l.bin")));
    let missing = load_cifar10(&dir.path().join("nope.bin"));
    let reader_ok = trunc_msg.contains("offset 6146")
        && trunc_msg.contains("9219")
        && trunc_msg.contains("6246")
        && label_msg.contains("label 10 at byte offset 3073")
        && matches!(&missing, Err(e) if e.exit_code() == 3)
        && parse_cifar10(&good, Path::new("g.bin")).unwrap().len() == 3;

    let pass = roundtrip && resume_ok && reader_ok;
    report(
        9,
        "determinism and persistence",
        pass,
        &format!(
            "save/load/save identical {roundtrip}, interrupted==continuous {resume_ok}, malformed files rejected with offsets {reader_ok}"
        ),
    );
    assert!(pass, "{trunc_msg}\n{label_msg}");
}
