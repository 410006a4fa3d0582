//! Token reconstruction, patch pseudo-label and class pseudo-label losses,
//! and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::{FoldSet, MaskSpec};

pub const TARGET_EPS: f32 = 1e-6;
pub const LOG_EPS: f32 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_m: f32,
    pub lambda_c: f32,
    pub lambda_p: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 1.0,
            lambda_c: 1.0,
            lambda_p: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_m, self.lambda_c, self.lambda_p];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!("loss weights must be finite and nonnegative, got {w:?}")));
        }
        Ok(())
    }

    /// Whether the pseudo-labelling branch contributes at all.
    pub fn uses_pseudo_labels(&self) -> bool {
        self.lambda_c != 0.0 || self.lambda_p != 0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub loss_m: f32,
    pub loss_c: f32,
    pub loss_p: f32,
    pub total: f32,
    /// Mean cosine between decoder outputs and targets at masked positions.
    pub mean_cos: f32,
    /// Mean row entropy of teacher patch labels.
    pub patch_entropy: f64,
    /// Mean row entropy of teacher class labels.
    pub class_entropy: f64,
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "loss_m={} loss_c={} loss_p={} total={} mean_cos={} patch_entropy={} class_entropy={}",
            self.loss_m, self.loss_c, self.loss_p, self.total, self.mean_cos, self.patch_entropy, self.class_entropy
        )
    }
}

/// Per-row `(t - mean) / sqrt(var + eps)` over a `[rows, d]` matrix, using
/// the population variance.
pub fn normalize_targets(rows: &[f32], d: usize, eps: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len());
    for r in rows.chunks_exact(d) {
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        out.extend(r.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    out
}

/// `1 - mean cos(decoder, target)` over every masked position of every image.
///
/// `decoder_out` is `[B * (N + 1), D]` with the class row first in each
/// sequence. `targets` holds normalized teacher patch tokens laid out as
/// `[B, K, F, D]`: fold `k` of image `b`, row `i` being the token for patch
/// `folds[b].folds[k][i]`.
pub fn recon_loss(tape: &mut Tape, decoder_out: Var, targets: &[f32], masks: &[MaskSpec], folds: &[FoldSet]) -> Result<Var> {
    let shape = tape.shape(decoder_out).to_vec();
    let b = masks.len();
    if shape.len() != 2 || b == 0 || folds.len() != b || shape[0] % b != 0 {
        return Err(Error::contract("decoder output, masks and fold sets disagree on batch size"));
    }
    let (seq, d) = (shape[0] / b, shape[1]);
    let n = seq - 1;
    let (k, f) = (folds[0].k(), folds[0].fold_len());
    if targets.len() != b * k * f * d {
        return Err(Error::Dimension {
            op: "recon_loss",
            lhs: vec![b, k, f, d],
            rhs: vec![targets.len()],
        });
    }
    let mut rows = Vec::new();
    let mut target = Vec::with_capacity(targets.len());
    for (i, (mask, fs)) in masks.iter().zip(folds).enumerate() {
        if mask.num_patches() != n || fs.k() != k || fs.fold_len() != f {
            return Err(Error::contract(format!("mask or folds of image {i} do not fit the decoder output")));
        }
        fs.check_against(mask)?;
        let at = fs.locate(n);
        for &p in &mask.masked {
            let (kk, ii) = at[p].expect("masked position lies in a fold");
            let t = ((i * k + kk) * f + ii) * d;
            rows.push(i * seq + 1 + p);
            target.extend_from_slice(&targets[t..t + d]);
        }
    }
    let m = rows.len();
    let pred = tape.index_rows(decoder_out, &rows)?;
    let target = tape.constant(vec![m, d], target)?;
    let cos = tape.row_cosine(pred, target)?;
    let mean = tape.mean(cos);
    Ok(tape.affine(mean, -1.0, 1.0))
}

/// Mean over rows of `H(target, q)`; `target` is a constant.
pub fn patch_pseudo_loss(tape: &mut Tape, student_assign: Var, matched_targets: &[f32]) -> Result<Var> {
    tape.cross_entropy(student_assign, matched_targets, LOG_EPS)
}

/// Same cross-entropy, one class distribution per image.
pub fn class_pseudo_loss(tape: &mut Tape, student_assign: Var, targets: &[f32]) -> Result<Var> {
    tape.cross_entropy(student_assign, targets, LOG_EPS)
}

/// Loss terms that were built; absent terms had zero weight.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub recon: Option<Var>,
    pub class: Option<Var>,
    pub patch: Option<Var>,
}

/// `lambda_m * L_m + lambda_c * L_c + lambda_p * L_p`, summed in that
/// order over the terms present. With no term present the total is a
/// constant zero.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let mut total: Option<Var> = None;
    let mut report = LossReport::default();
    for (term, w, slot) in [
        (terms.recon, weights.lambda_m, &mut report.loss_m),
        (terms.class, weights.lambda_c, &mut report.loss_c),
        (terms.patch, weights.lambda_p, &mut report.loss_p),
    ] {
        let Some(v) = term else { continue };
        *slot = tape.value(v)[0];
        let scaled = tape.scale(v, w);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(vec![1], vec![0.0])?,
    };
    report.total = tape.value(total)[0];
    report.mean_cos = terms.recon.map_or(0.0, |_| 1.0 - report.loss_m);
    if ![report.loss_m, report.loss_c, report.loss_p, report.total].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss: {report}")));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{gen_mask, split_folds};
    use crate::pseudo_label::entropy;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f32> {
        let mut r = stream(seed, &[]);
        (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
    }

    fn random_dist(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
        let mut r = stream(seed, &[]);
        let mut out = Vec::new();
        for _ in 0..rows {
            let row: Vec<f32> = (0..cols).map(|_| r.random_range(0.01f32..1.0)).collect();
            let s: f32 = row.iter().sum();
            out.extend(row.iter().map(|v| v / s));
        }
        out
    }

    #[test]
    fn normalize_reference_values() {
        assert_eq!(normalize_targets(&[2.5; 4], 4, TARGET_EPS), vec![0.0; 4]);
        let r = normalize_targets(&[1.0, 2.0, 3.0], 3, 1e-6);
        for (g, w) in r.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((g - w).abs() < 1e-4, "{r:?}");
        }
        let x = random(10 * 32, 1);
        let y = normalize_targets(&x, 32, TARGET_EPS);
        for row in y.chunks_exact(32) {
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / 32.0;
            let v = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3);
        }
    }

    struct Case {
        masks: Vec<MaskSpec>,
        folds: Vec<FoldSet>,
        targets: Vec<f32>,
        n: usize,
        d: usize,
    }

    fn case(seed: u64) -> Case {
        let (b, n, d, k) = (2, 16, 6, 3);
        let mut r = stream(seed, &[]);
        let masks: Vec<_> = (0..b).map(|_| gen_mask(n, 0.75, &mut r).unwrap()).collect();
        let folds: Vec<_> = masks.iter().map(|m| split_folds(m, k, &mut r).unwrap()).collect();
        let targets = normalize_targets(&random(b * 12 * d, seed + 1), d, TARGET_EPS);
        Case { masks, folds, targets, n, d }
    }

    /// Decoder output whose masked rows are exactly the targets.
    fn aligned(c: &Case) -> Vec<f32> {
        let (n, d) = (c.n, c.d);
        let mut out = random(c.masks.len() * (n + 1) * d, 99);
        for (b, fs) in c.folds.iter().enumerate() {
            for (k, fold) in fs.folds.iter().enumerate() {
                for (i, &p) in fold.iter().enumerate() {
                    let src = ((b * fs.k() + k) * fs.fold_len() + i) * d;
                    let dst = (b * (n + 1) + 1 + p) * d;
                    out[dst..dst + d].copy_from_slice(&c.targets[src..src + d]);
                }
            }
        }
        out
    }

    fn loss_of(c: &Case, out: Vec<f32>) -> f32 {
        let mut tape = Tape::new();
        let v = tape.constant(vec![c.masks.len() * (c.n + 1), c.d], out).unwrap();
        let l = recon_loss(&mut tape, v, &c.targets, &c.masks, &c.folds).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn recon_equal_and_orthogonal() {
        let c = case(4);
        assert!(loss_of(&c, aligned(&c)).abs() < 1e-6);
        // Rotate each target row by swapping pairs to get an orthogonal row.
        let mut out = aligned(&c);
        for (b, mask) in c.masks.iter().enumerate() {
            for &p in &mask.masked {
                let r = (b * (c.n + 1) + 1 + p) * c.d;
                for j in (0..c.d).step_by(2) {
                    let (x, y) = (out[r + j], out[r + j + 1]);
                    out[r + j] = -y;
                    out[r + j + 1] = x;
                }
            }
        }
        assert!((loss_of(&c, out) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recon_matches_scalar_reference() {
        let c = case(8);
        let out = random(2 * 17 * c.d, 5);
        let mut total = 0.0f64;
        let mut count = 0;
        for b in 0..2 {
            for (k, fold) in c.folds[b].folds.iter().enumerate() {
                for (i, &p) in fold.iter().enumerate() {
                    let t = &c.targets[((b * 3 + k) * 4 + i) * c.d..][..c.d];
                    let o = &out[(b * 17 + 1 + p) * c.d..][..c.d];
                    let (mut dot, mut no, mut nt) = (0.0f64, 0.0f64, 0.0f64);
                    for j in 0..c.d {
                        dot += o[j] as f64 * t[j] as f64;
                        no += (o[j] as f64).powi(2);
                        nt += (t[j] as f64).powi(2);
                    }
                    total += dot / (no.sqrt() * nt.sqrt());
                    count += 1;
                }
            }
        }
        let want = 1.0 - total / count as f64;
        assert!((loss_of(&c, out) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn recon_rejects_inconsistent_folds() {
        let mut c = case(3);
        c.folds[1] = c.folds[0].clone();
        let mut tape = Tape::new();
        let v = tape.constant(vec![34, c.d], vec![0.5; 34 * c.d]).unwrap();
        let err = recon_loss(&mut tape, v, &c.targets, &c.masks, &c.folds).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let k = 4096;
        let u = vec![1.0 / k as f32; k];
        let mut tape = Tape::new();
        let q = tape.constant(vec![1, k], u.clone()).unwrap();
        let l = patch_pseudo_loss(&mut tape, q, &u).unwrap();
        assert!((tape.value(l)[0] - (k as f32).ln()).abs() < 1e-4);
        let c = class_pseudo_loss(&mut tape, q, &u).unwrap();
        assert_eq!(tape.value(c), tape.value(l));
        let mut one = vec![0.0; 8];
        one[3] = 1.0;
        let q = tape.constant(vec![1, 8], one.clone()).unwrap();
        let l = patch_pseudo_loss(&mut tape, q, &one).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-6);

        let p = random_dist(5, 12, 1);
        let qd = random_dist(5, 12, 2);
        let q = tape.constant(vec![5, 12], qd.clone()).unwrap();
        let l = patch_pseudo_loss(&mut tape, q, &p).unwrap();
        let want: f64 = p
            .iter()
            .zip(&qd)
            .map(|(&a, &b)| -(a as f64) * ((b + LOG_EPS) as f64).ln())
            .sum::<f64>()
            / 5.0;
        assert!((tape.value(l)[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn weighted_totals() {
        let mut tape = Tape::new();
        let m = tape.constant(vec![1], vec![0.75]).unwrap();
        let c = tape.constant(vec![1], vec![2.0]).unwrap();
        let p = tape.constant(vec![1], vec![3.5]).unwrap();
        let all = LossTerms { recon: Some(m), class: Some(c), patch: Some(p) };
        let (_, r) = total_loss(&mut tape, all, &LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.75 + 2.0 + 3.5);
        let only_m = LossWeights { lambda_m: 1.0, lambda_c: 0.0, lambda_p: 0.0 };
        let (_, r) = total_loss(&mut tape, LossTerms { recon: Some(m), ..Default::default() }, &only_m).unwrap();
        assert_eq!((r.total, r.loss_c, r.loss_p), (0.75, 0.0, 0.0));
        let (t, r) = total_loss(&mut tape, LossTerms::default(), &LossWeights { lambda_m: 0.0, ..only_m }).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(tape.backward(t).is_ok());
        let nan = tape.constant(vec![1], vec![f32::NAN]).unwrap();
        let err = total_loss(&mut tape, LossTerms { recon: Some(nan), ..Default::default() }, &only_m).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    proptest! {
        #[test]
        fn recon_invariant_to_row_scale(seed in any::<u64>()) {
            let c = case(seed % 1000);
            let out = random(2 * 17 * c.d, seed);
            let mut r = stream(seed, &[7]);
            let scaled: Vec<f32> = out
                .chunks_exact(c.d)
                .flat_map(|row| { let s = r.random_range(0.1f32..10.0); row.iter().map(move |v| v * s).collect::<Vec<_>>() })
                .collect();
            prop_assert!((loss_of(&c, out) - loss_of(&c, scaled)).abs() < 1e-5);
        }

        #[test]
        fn gibbs_inequality(seed in any::<u64>(), k in 2usize..64) {
            let p = random_dist(1, k, seed);
            let q = random_dist(1, k, seed ^ 0xabc);
            let h_pq: f64 = p.iter().zip(&q).map(|(&a, &b)| -(a as f64) * (b as f64).ln()).sum();
            prop_assert!(h_pq >= entropy(&p) - 1e-9);
        }
    }
}
