//! Central finite-difference gradient suite.
//!
//! The analytic `f32` gradients of a recorded graph are compared against
//! central differences of the same graph re-evaluated in `f64`
//! ([`Tape::replay_f64`]).

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{AugmentedViews, Batch};
use crate::error::Result;
use crate::image::Image;
use crate::rng::stream;
use crate::train::{TrainConfig, Trainer};
use crate::vit::{ProjectionHeadConfig, ViTConfig};

/// Perturbation applied to each input element.
pub const STEP: f64 = 1e-3;
/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, ABS_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst: Option<Worst>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < REL_TOL
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} elements={:<6} max_rel={:.3e} max_abs={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel,
            self.max_abs
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(f, " worst={}[{}] analytic={} numeric={}", w.input, w.index, w.analytic, w.numeric)?;
        }
        Ok(())
    }
}

/// Compares `d loss / d input` for every element of every listed input.
pub fn check_graph(name: &str, tape: &Tape, loss: Var, inputs: &[(String, Var)]) -> Result<CheckReport> {
    let grads = tape.backward(loss)?;
    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel: 0.0,
        max_abs: 0.0,
        worst: None,
    };
    let mut leaves = HashMap::new();
    for (label, var) in inputs {
        let base: Vec<f64> = tape.value(*var).iter().map(|&x| x as f64).collect();
        let analytic = grads.get(*var);
        for i in 0..base.len() {
            let mut at = |delta: f64| {
                let mut x = base.clone();
                x[i] += delta;
                leaves.insert(*var, x);
                tape.replay_f64(loss, &leaves)[0]
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            leaves.clear();
            let a = analytic.map_or(0.0, |g| g[i] as f64);
            let r = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs = report.max_abs.max((a - numeric).abs());
            if r >= report.max_rel {
                report.max_rel = r;
                report.worst = Some(Worst {
                    input: label.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn input(tape: &mut Tape, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    let n = shape.iter().product();
    let t = Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).expect("shape").with_grad();
    tape.leaf(&t)
}

/// Reduces a tensor output to a scalar through fixed random weights, so
/// every output element has a distinct sensitivity.
fn project(tape: &mut Tape, rng: &mut ChaCha8Rng, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(shape.clone(), uniform(rng, shape.iter().product(), -1.0, 1.0))?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type Case = fn(&mut Tape, &mut ChaCha8Rng) -> Result<(Var, Vec<(String, Var)>)>;

fn named(vars: &[Var]) -> Vec<(String, Var)> {
    vars.iter().enumerate().map(|(i, &v)| (format!("in{i}"), v)).collect()
}

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |t, r| {
            let (a, b) = (input(t, r, &[4, 5]), input(t, r, &[5, 3]));
            let o = t.matmul(a, b)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("bmm", |t, r| {
            let (a, b) = (input(t, r, &[2, 3, 4]), input(t, r, &[2, 4, 2]));
            let o = t.bmm(a, b, false, false)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("bmm_transposed", |t, r| {
            let (a, b) = (input(t, r, &[2, 4, 3]), input(t, r, &[2, 2, 4]));
            let o = t.bmm(a, b, true, true)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("add", |t, r| {
            let (a, b) = (input(t, r, &[3, 4]), input(t, r, &[3, 4]));
            let o = t.add(a, b)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("sub", |t, r| {
            let (a, b) = (input(t, r, &[3, 4]), input(t, r, &[3, 4]));
            let o = t.sub(a, b)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("mul", |t, r| {
            let (a, b) = (input(t, r, &[3, 4]), input(t, r, &[3, 4]));
            let o = t.mul(a, b)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("affine", |t, r| {
            let a = input(t, r, &[3, 4]);
            let o = t.affine(a, 1.7, -0.3);
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("add_bias", |t, r| {
            let (a, b) = (input(t, r, &[3, 4]), input(t, r, &[4]));
            let o = t.add_bias(a, b)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("scale_groups", |t, r| {
            let a = input(t, r, &[3, 2, 2]);
            let o = t.scale_groups(a, vec![0.5, 0.0, 2.0])?;
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("layernorm", |t, r| {
            let (a, g, b) = (input(t, r, &[3, 5]), input(t, r, &[5]), input(t, r, &[5]));
            let o = t.layernorm(a, g, b, 1e-5)?;
            Ok((project(t, r, o)?, named(&[a, g, b])))
        }),
        ("softmax_axis0", |t, r| {
            let a = input(t, r, &[2, 3, 4]);
            let o = t.softmax(a, 0)?;
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("softmax_axis1", |t, r| {
            let a = input(t, r, &[2, 3, 4]);
            let o = t.softmax(a, 1)?;
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("softmax_last", |t, r| {
            let a = input(t, r, &[2, 3, 4]);
            let o = t.softmax_last(a);
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("gelu", |t, r| {
            let a = input(t, r, &[3, 4]);
            let s = t.scale(a, 3.0);
            let o = t.gelu(s);
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("reshape", |t, r| {
            let a = input(t, r, &[3, 4]);
            let o = t.reshape(a, vec![2, 6])?;
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("permute", |t, r| {
            let a = input(t, r, &[2, 3, 4]);
            let o = t.permute(a, &[2, 0, 1])?;
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("index_rows", |t, r| {
            let a = input(t, r, &[4, 3]);
            let o = t.index_rows(a, &[2, 0, 2, 3])?;
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("concat_rows", |t, r| {
            let (a, b) = (input(t, r, &[2, 3]), input(t, r, &[1, 3]));
            let o = t.concat_rows(&[a, b])?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("sum", |t, r| {
            let a = input(t, r, &[3, 4]);
            let sq = t.mul(a, a)?;
            Ok((t.sum(sq), named(&[a])))
        }),
        ("mean", |t, r| {
            let a = input(t, r, &[3, 4]);
            let sq = t.mul(a, a)?;
            Ok((t.mean(sq), named(&[a])))
        }),
        ("row_cosine", |t, r| {
            let (a, b) = (input(t, r, &[3, 4]), input(t, r, &[3, 4]));
            let o = t.row_cosine(a, b)?;
            Ok((project(t, r, o)?, named(&[a, b])))
        }),
        ("l2_normalize_rows", |t, r| {
            let a = input(t, r, &[3, 4]);
            let o = t.l2_normalize_rows(a, 1e-6);
            Ok((project(t, r, o)?, named(&[a])))
        }),
        ("softmax_cross_entropy", |t, r| {
            let a = input(t, r, &[3, 5]);
            let q = t.softmax_last(a);
            let mut target = uniform(r, 15, 0.0, 1.0);
            for row in target.chunks_exact_mut(5) {
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok((t.cross_entropy(q, &target, 1e-9)?, named(&[a])))
        }),
    ]
}

/// Finite-difference check of every differentiable tape op on random
/// small inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = stream(seed, &[0x6763, i as u64]);
            let mut tape = Tape::new();
            let (loss, inputs) = case(&mut tape, &mut rng)?;
            check_graph(name, &tape, loss, &inputs)
        })
        .collect()
}

/// Tiny model for the composite check: 8x8 images in 2x2 patches (16
/// tokens), width 8, two encoder blocks, 8 prototypes.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.model = ViTConfig {
        image_size: 8,
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        decoder_depth: 1,
        decoder_dim: 8,
        decoder_heads: 2,
        drop_path_rate: 0.1,
        ..ViTConfig::default()
    };
    c.head = ProjectionHeadConfig {
        num_shared_layers: 2,
        hidden_dim: 16,
        output_dim: 8,
        ..Default::default()
    };
    c.optim.batch_size = 2;
    c.optim.epochs = 1;
    c.optim.warmup_epochs = 0;
    c
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image {
        height: side,
        width: side,
        channels: 3,
        data: uniform(rng, side * side * 3, -1.5, 1.5),
    }
}

/// Gradient of the weighted three-term loss with respect to every
/// student parameter (encoder, decoder, projection head).
pub fn composite_check(seed: u64) -> Result<CheckReport> {
    composite_check_for(&tiny_config(seed))
}

/// [`composite_check`] for an arbitrary model whose image side and batch
/// size come from `cfg`.
pub fn composite_check_for(cfg: &TrainConfig) -> Result<CheckReport> {
    let seed = cfg.seed;
    let b = cfg.optim.batch_size;
    let mut tr = Trainer::new(cfg, b, true)?;
    let mut rng = stream(seed, &[0x6763, 0xC0]);
    // Initialization scale (std 0.02) leaves trunk features with norms
    // near 1e-2, where a 1e-3 step is no longer small; move to a point
    // with unit-scale activations.
    let head = tr.student.head_params.as_mut().expect("pseudo branch");
    for store in [&mut tr.student.enc, &mut tr.student.dec, head] {
        for t in store.tensors_mut() {
            let s = match t.shape() {
                [fan_in, _] if *fan_in > 1 => 1.0 / (*fan_in as f32).sqrt(),
                _ => 0.5,
            };
            let fresh = uniform(&mut rng, t.numel(), -s, s);
            t.data_mut().copy_from_slice(&fresh);
        }
    }
    let side = cfg.model.image_size;
    let views = (0..b)
        .map(|i| AugmentedViews {
            simple: random_image(&mut rng, side),
            complex: Some(random_image(&mut rng, side)),
            source: i,
            label: 0,
        })
        .collect();
    let (mut tape, loss, _) = tr.forward_loss(&Batch { views })?;
    let mut inputs = Vec::new();
    let stores = [
        ("encoder", &tr.student.enc),
        ("decoder", &tr.student.dec),
        ("head", tr.student.head_params.as_ref().expect("pseudo branch")),
    ];
    for (prefix, store) in stores {
        if !tape.binds_store(store) {
            continue;
        }
        for (id, name, _) in store.iter() {
            inputs.push((format!("{prefix}/{name}"), tape.param(store, id)));
        }
    }
    check_graph("composite_total_loss", &tape, loss, &inputs)
}

/// The op suite followed by the composite check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut all = op_suite(seed)?;
    all.push(composite_check(seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2e-5, 1e-5) - 0.1).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cubic_passes_and_missing_gradient_fails() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let cube = t.mul(sq, x).unwrap();
        let l = t.sum(cube);
        let r = check_graph("cube", &t, l, &[("x".into(), x)]).unwrap();
        assert!(r.passed(), "{r}");
        assert!((r.worst.unwrap().analytic - 12.0).abs() < 1e-6);

        // a constant input gets no analytic gradient, but the function
        // still depends on it
        let mut t = Tape::new();
        let c = t.constant(vec![1], vec![2.0]).unwrap();
        let sq = t.mul(c, c).unwrap();
        let l = t.sum(sq);
        let r = check_graph("detached", &t, l, &[("c".into(), c)]).unwrap();
        assert!(!r.passed());
        assert!(r.to_string().starts_with("FAIL"));
    }

    #[test]
    fn op_suite_passes() {
        for r in op_suite(7).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn composite_passes() {
        let r = composite_check(3).unwrap();
        assert!(r.checked > 1000, "{r}");
        assert!(r.passed(), "{r}");
    }
}
