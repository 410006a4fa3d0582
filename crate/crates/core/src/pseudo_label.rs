//! Pseudo labels from projection-head scores.
//!
//! Teacher scores are balanced with Sinkhorn normalization per fold across
//! the batch; student scores go through a tempered softmax on the tape.
//! Masked student positions receive the label of their cosine-nearest
//! teacher patch, since the two views are not spatially aligned.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::vit::{EncodedTokens, ProjectionHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTarget {
    /// One target per image: the mean of the per-fold class labels.
    FoldAverage,
    /// One cross-entropy term per fold, averaged.
    PerFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub sinkhorn_iters: usize,
    pub teacher_temp: f32,
    pub student_temp: f32,
    pub class_target: ClassTarget,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            sinkhorn_iters: 3,
            teacher_temp: 0.05,
            student_temp: 0.1,
            class_target: ClassTarget::FoldAverage,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0) {
            return Err(Error::config("pseudo-label temperatures must be positive"));
        }
        Ok(())
    }
}

/// Sinkhorn output together with the column-normalized matrix that
/// preceded the final row normalization.
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    pub output: Vec<f32>,
    pub last_column_step: Option<Vec<f32>>,
}

/// Balanced soft assignment of `rows` samples to `cols` clusters.
pub fn sinkhorn_normalize(scores: &[f32], rows: usize, cols: usize, n_iters: usize, temperature: f32) -> Result<Vec<f32>> {
    Ok(sinkhorn(scores, rows, cols, n_iters, temperature, false)?.output)
}

pub fn sinkhorn_trace(scores: &[f32], rows: usize, cols: usize, n_iters: usize, temperature: f32) -> Result<SinkhornTrace> {
    sinkhorn(scores, rows, cols, n_iters, temperature, true)
}

fn sinkhorn(
    scores: &[f32],
    rows: usize,
    cols: usize,
    n_iters: usize,
    temperature: f32,
    keep_column_step: bool,
) -> Result<SinkhornTrace> {
    if rows == 0 || cols == 0 || scores.len() != rows * cols {
        return Err(Error::Dimension {
            op: "sinkhorn",
            lhs: vec![rows, cols],
            rhs: vec![scores.len()],
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("sinkhorn temperature {temperature} must be positive")));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite sinkhorn score at index {i}")));
    }
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let inv_t = 1.0 / temperature as f64;
    let mut q: Vec<f64> = Vec::with_capacity(scores.len());
    let mut sums = vec![0.0f64; cols];
    for r in scores.chunks_exact(cols) {
        for (s, &v) in sums.iter_mut().zip(r) {
            let e = ((v as f64 - max) * inv_t).exp();
            q.push(e);
            *s += e;
        }
    }
    let col_target = rows as f64 / cols as f64;
    let mut last_column_step = None;
    // each round scales columns, then rows, while summing columns for the next
    for it in 0..n_iters {
        let factors: Vec<f64> = sums.iter().map(|&s| if s > 0.0 { col_target / s } else { 1.0 }).collect();
        let keep = keep_column_step && it + 1 == n_iters;
        let mut snapshot = Vec::with_capacity(if keep { q.len() } else { 0 });
        sums.iter_mut().for_each(|s| *s = 0.0);
        for r in q.chunks_exact_mut(cols) {
            r.iter_mut().zip(&factors).for_each(|(v, f)| *v *= f);
            if keep {
                snapshot.extend(r.iter().map(|&v| v as f32));
            }
            normalize_rows(r, cols);
            sums.iter_mut().zip(r.iter()).for_each(|(s, v)| *s += v);
        }
        if keep {
            last_column_step = Some(snapshot);
        }
    }
    if n_iters == 0 {
        normalize_rows(&mut q, cols);
    }
    Ok(SinkhornTrace {
        output: q.into_iter().map(|v| v as f32).collect(),
        last_column_step,
    })
}

fn normalize_rows(q: &mut [f64], cols: usize) {
    for r in q.chunks_exact_mut(cols) {
        let s: f64 = r.iter().sum();
        if s > 0.0 {
            let inv = 1.0 / s;
            r.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

/// Sinkhorn-balanced teacher labels for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignments {
    /// `[batch, k_c]`
    pub class: Vec<f32>,
    /// `[batch * fold_len, k_c]`, image-major.
    pub patch: Vec<f32>,
    pub batch: usize,
    pub fold_len: usize,
    pub k_c: usize,
}

/// Runs the teacher head over fold-encoded tokens and balances class and
/// patch scores separately for every fold.
///
/// `encoded` holds `batch * k` sequences ordered image-major, sequence
/// `b * k + j` being fold `j` of image `b`. The tape must not record
/// gradients.
pub fn teacher_targets(
    tape: &mut Tape,
    head: &ProjectionHead,
    store: &ParamStore,
    encoded: &EncodedTokens,
    k: usize,
    cfg: &PseudoLabelConfig,
) -> Result<Vec<FoldAssignments>> {
    if tape.grad_enabled() {
        return Err(Error::contract("teacher targets must be computed without gradient recording"));
    }
    if k == 0 || encoded.batch % k != 0 {
        return Err(Error::contract(format!("{} sequences do not split into {k} folds", encoded.batch)));
    }
    let out = head.forward(tape, store, encoded)?;
    let k_c = head.config.output_dim;
    let class = tape.value(out.class_scores).to_vec();
    let patch = tape.value(out.patch_scores).to_vec();
    let batch = encoded.batch / k;
    let fold_len = encoded.seq - 1;
    let width = fold_len * k_c;
    (0..k)
        .map(|j| {
            let mut c = Vec::with_capacity(batch * k_c);
            let mut p = Vec::with_capacity(batch * width);
            for b in 0..batch {
                let s = b * k + j;
                c.extend_from_slice(&class[s * k_c..(s + 1) * k_c]);
                p.extend_from_slice(&patch[s * width..(s + 1) * width]);
            }
            Ok(FoldAssignments {
                class: sinkhorn_normalize(&c, batch, k_c, cfg.sinkhorn_iters, cfg.teacher_temp)?,
                patch: sinkhorn_normalize(&p, batch * fold_len, k_c, cfg.sinkhorn_iters, cfg.teacher_temp)?,
                batch,
                fold_len,
                k_c,
            })
        })
        .collect()
}

/// Argmin of cosine distance for every student row over all teacher rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(fold, row)` per student row.
    pub chosen: Vec<(usize, usize)>,
    pub distance: Vec<f64>,
    /// Student or teacher rows with zero norm.
    pub zero_rows: usize,
}

/// `student` is `[M, d]`; each teacher fold is `[F_k, d]`. Distance is
/// `1 - cos`; a zero-norm row is at distance 1 from everything. Ties go to
/// the smallest `(fold, row)`.
pub fn nearest_patch_match(student: &[f32], teacher_folds: &[&[f32]], d: usize) -> Result<MatchResult> {
    if d == 0 || student.len() % d != 0 || teacher_folds.iter().any(|f| f.len() % d != 0) {
        return Err(Error::Dimension {
            op: "nearest_patch_match",
            lhs: vec![student.len(), d],
            rhs: teacher_folds.iter().map(|f| f.len()).collect(),
        });
    }
    let norm = |r: &[f32]| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    let teacher: Vec<Vec<(&[f32], f64)>> = teacher_folds
        .iter()
        .map(|f| f.chunks_exact(d).map(|r| (r, norm(r))).collect())
        .collect();
    let mut zero_rows = teacher.iter().flatten().filter(|(_, n)| *n == 0.0).count();
    let mut chosen = Vec::with_capacity(student.len() / d);
    let mut distance = Vec::with_capacity(student.len() / d);
    for s in student.chunks_exact(d) {
        let ns = norm(s);
        if ns == 0.0 {
            zero_rows += 1;
        }
        let mut best: Option<((usize, usize), f64)> = None;
        for (k, fold) in teacher.iter().enumerate() {
            for (i, &(t, nt)) in fold.iter().enumerate() {
                let dist = if ns == 0.0 || nt == 0.0 {
                    1.0
                } else {
                    let dot: f64 = s.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum();
                    1.0 - dot / (ns * nt)
                };
                if best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some(((k, i), dist));
                }
            }
        }
        let (c, dist) = best.ok_or_else(|| Error::contract("no teacher rows to match against"))?;
        chosen.push(c);
        distance.push(dist);
    }
    if zero_rows > 0 {
        log::warn!("nearest_patch_match: {zero_rows} zero-norm feature rows treated as distance 1");
    }
    Ok(MatchResult {
        chosen,
        distance,
        zero_rows,
    })
}

/// Elementwise mean of equally sized distributions (or stacks of them).
pub fn class_target_average(per_fold: &[&[f32]]) -> Result<Vec<f32>> {
    let first = per_fold.first().ok_or_else(|| Error::contract("class target average of zero folds"))?;
    if per_fold.iter().any(|f| f.len() != first.len()) {
        return Err(Error::contract("fold class targets differ in length"));
    }
    let k = per_fold.len() as f64;
    Ok((0..first.len())
        .map(|i| (per_fold.iter().map(|f| f[i] as f64).sum::<f64>() / k) as f32)
        .collect())
}

/// Row-wise `softmax(scores / temperature)`, recorded on the tape.
pub fn student_assign(tape: &mut Tape, scores: Var, temperature: f32) -> Var {
    let s = tape.scale(scores, 1.0 / temperature);
    tape.softmax_last(s)
}

/// Mean Shannon entropy (nats) of the rows of a `[rows, cols]` matrix.
pub fn mean_row_entropy(p: &[f32], cols: usize) -> f64 {
    let rows = p.len() / cols;
    if rows == 0 {
        return 0.0;
    }
    p.chunks_exact(cols).map(entropy).sum::<f64>() / rows as f64
}

pub fn entropy(row: &[f32]) -> f64 {
    row.iter().filter(|&&v| v > 0.0).map(|&v| -(v * v.ln()) as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, seed: u64, scale: f32) -> Vec<f32> {
        let mut r = stream(seed, &[]);
        (0..n).map(|_| r.random_range(-scale..scale)).collect()
    }

    /// Plain alternating normalization, column then row, `iters` rounds.
    fn oracle(scores: &[f64], rows: usize, cols: usize, iters: usize) -> Vec<f64> {
        let mut q: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        for _ in 0..iters {
            for c in 0..cols {
                let s: f64 = (0..rows).map(|r| q[r * cols + c]).sum();
                (0..rows).for_each(|r| q[r * cols + c] *= rows as f64 / cols as f64 / s);
            }
            for r in 0..rows {
                let s: f64 = q[r * cols..(r + 1) * cols].iter().sum();
                q[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= s);
            }
        }
        q
    }

    #[test]
    fn constant_scores_give_uniform_rows() {
        for (rows, cols) in [(4, 8), (1, 3), (64, 256)] {
            let q = sinkhorn_normalize(&vec![0.7; rows * cols], rows, cols, 3, 0.05).unwrap();
            assert!(q.iter().all(|&v| (v - 1.0 / cols as f32).abs() <= 1e-7));
        }
    }

    #[test]
    fn two_by_two_fixed_point() {
        for scores in [[1.0f32, 0.0, 0.0, 1.0], [2.0, 0.5, -1.0, 0.25]] {
            let want = oracle(&scores.map(f64::from), 2, 2, 1000);
            let got = sinkhorn_normalize(&scores, 2, 2, 1000, 1.0).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-4, "{got:?} vs {want:?}");
            }
        }
        // symmetric input is balanced from the start
        let q = sinkhorn_normalize(&[1.0, 0.0, 0.0, 1.0], 2, 2, 3, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((q[0] as f64 - e / (e + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn three_iterations_nearly_balance_columns() {
        let (rows, cols) = (64, 256);
        let s = random(rows * cols, 3, 1.0);
        let q = sinkhorn_normalize(&s, rows, cols, 3, 0.5).unwrap();
        for c in 0..cols {
            let sum: f32 = (0..rows).map(|r| q[r * cols + c]).sum();
            let target = rows as f32 / cols as f32;
            assert!((sum - target).abs() <= 0.1 * target, "column {c}: {sum}");
        }
    }

    #[test]
    fn column_step_hits_marginals() {
        let (rows, cols) = (16, 8);
        let tr = sinkhorn_trace(&random(rows * cols, 5, 2.0), rows, cols, 3, 0.1).unwrap();
        let mid = tr.last_column_step.unwrap();
        for c in 0..cols {
            let sum: f32 = (0..rows).map(|r| mid[r * cols + c]).sum();
            assert!((sum - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_scores_rejected() {
        for bad in [f32::NAN, f32::INFINITY] {
            let err = sinkhorn_normalize(&[0.0, bad], 1, 2, 3, 0.1).unwrap_err();
            assert!(matches!(err, Error::Numeric(_)));
        }
    }

    #[test]
    fn lower_temperature_sharpens() {
        let s = random(8 * 16, 9, 1.0);
        let mut last = f64::INFINITY;
        for t in [1.0, 0.5, 0.2, 0.1, 0.05] {
            let h = mean_row_entropy(&sinkhorn_normalize(&s, 8, 16, 3, t).unwrap(), 16);
            assert!(h <= last + 1e-9, "entropy rose at t={t}");
            last = h;
        }
    }

    #[test]
    fn identical_rows_match_identity() {
        let s = random(6 * 5, 1, 1.0);
        let m = nearest_patch_match(&s, &[&s], 5).unwrap();
        assert_eq!(m.chosen, (0..6).map(|i| (0, i)).collect::<Vec<_>>());
        assert!(m.distance.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn antipodal_ties_go_to_first_row() {
        let t = vec![1.0f32, 2.0, -0.5];
        let teacher: Vec<f32> = t.iter().cycle().take(12).copied().collect();
        let s: Vec<f32> = t.iter().map(|v| -v).collect();
        let m = nearest_patch_match(&s, &[&teacher, &teacher], 3).unwrap();
        assert_eq!(m.chosen, vec![(0, 0)]);
        assert!((m.distance[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_are_distance_one() {
        let m = nearest_patch_match(&[0.0, 0.0], &[&[1.0, 0.0, -1.0, 0.0]], 2).unwrap();
        assert_eq!((m.chosen[0], m.distance[0], m.zero_rows), ((0, 0), 1.0, 1));
    }

    #[test]
    fn class_average_cases() {
        let a = [0.2f32, 0.3, 0.5];
        assert_eq!(class_target_average(&[&a]).unwrap(), a.to_vec());
        let avg = class_target_average(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(avg, vec![0.5, 0.0, 0.5]);
        assert!(class_target_average(&[]).is_err());
    }

    #[test]
    fn student_softmax_uniform_and_sharpening() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![2, 4], vec![0.3; 8]).unwrap();
        let p = student_assign(&mut tape, s, 0.1);
        assert!(tape.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let x = random(5 * 32, 2, 1.0);
        let mut last = f64::INFINITY;
        for t in [1.0, 0.5, 0.25, 0.125] {
            let v = tape.constant(vec![5, 32], x.clone()).unwrap();
            let p = student_assign(&mut tape, v, t);
            let h = mean_row_entropy(tape.value(p), 32);
            assert!(h <= last + 1e-6);
            last = h;
        }
    }

    proptest! {
        #[test]
        fn sinkhorn_rows_sum_to_one(rows in 1usize..24, cols in 1usize..40, iters in 0usize..6, seed in any::<u64>(), t in 0.02f32..2.0) {
            let q = sinkhorn_normalize(&random(rows * cols, seed, 3.0), rows, cols, iters, t).unwrap();
            for r in q.chunks_exact(cols) {
                prop_assert!((r.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn match_invariant_to_positive_rescaling(seed in any::<u64>()) {
            let mut r = stream(seed, &[]);
            let d = 8;
            let s = random(6 * d, seed, 1.0);
            let t = random(10 * d, seed ^ 1, 1.0);
            let base = nearest_patch_match(&s, &[&t[..5 * d], &t[5 * d..]], d).unwrap();
            let rescale = |x: &[f32], r: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
                x.chunks_exact(d).flat_map(|row| { let c = r.random_range(0.1f32..10.0); row.iter().map(move |v| v * c).collect::<Vec<_>>() }).collect()
            };
            let s2 = rescale(&s, &mut r);
            let t2 = rescale(&t, &mut r);
            let scaled = nearest_patch_match(&s2, &[&t2[..5 * d], &t2[5 * d..]], d).unwrap();
            prop_assert_eq!(base.chosen, scaled.chosen);
        }
    }
}
