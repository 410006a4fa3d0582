//! Frozen-feature evaluation: linear probe and k-nearest-neighbour vote.

use rand::seq::SliceRandom;

use crate::autodiff::{adamw_step, AdamWState, ParamStore, Tape, Tensor};
use crate::data::augment::standardize;
use crate::data::cifar::CLASSES;
use crate::data::{AugmentConfig, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::vit::{patchify, Encoder, NoDrop, TokenBatch};

use super::config::EvalConfig;

/// Class-token features `[records, D]` of the whole, unmasked image, from
/// standardized but otherwise unaugmented pixels.
pub fn extract_features(
    encoder: &Encoder,
    params: &ParamStore,
    records: &[ImageRecord],
    augment: &AugmentConfig,
    batch: usize,
) -> Result<Vec<f32>> {
    let cfg = &encoder.config;
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let mut out = Vec::with_capacity(records.len() * d);
    for chunk in records.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * n * cfg.patch_dim());
        for r in chunk {
            let mut img = r.to_image();
            standardize(&mut img, &augment.mean, &augment.std);
            data.extend(patchify(&img, cfg.patch_size)?.data);
        }
        let positions = (0..chunk.len()).flat_map(|_| 0..n).collect();
        let tb = TokenBatch::new(chunk.len(), n, cfg.patch_dim(), data, positions)?;
        let mut tape = Tape::no_grad();
        let enc = encoder.forward(&mut tape, params, &tb, None::<&mut NoDrop>)?;
        let v = tape.value(enc.tokens);
        for r in enc.class_rows() {
            out.extend_from_slice(&v[r * d..(r + 1) * d]);
        }
    }
    Ok(out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-dimension mean and std of `[rows, d]` features.
fn feature_stats(x: &[f32], d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (x.len() / d).max(1) as f64;
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for r in x.chunks_exact(d) {
        for j in 0..d {
            mean[j] += r[j] as f64;
            sq[j] += (r[j] as f64).powi(2);
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let std = (0..d).map(|j| (sq[j] / rows - mean[j] * mean[j]).max(0.0).sqrt() + 1e-6).collect();
    (mean, std)
}

fn apply_stats(x: &[f32], d: usize, mean: &[f64], std: &[f64]) -> Vec<f32> {
    x.chunks_exact(d)
        .flat_map(|r| (0..d).map(move |j| ((r[j] as f64 - mean[j]) / std[j]) as f32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Softmax regression on standardized frozen features, trained with AdamW
/// for `cfg.probe_epochs` passes; weights start at zero.
pub fn linear_probe(
    train_x: &[f32],
    train_y: &[u8],
    test_x: &[f32],
    test_y: &[u8],
    d: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() * d || test_x.len() != test_y.len() * d || train_y.is_empty() {
        return Err(Error::Dimension {
            op: "linear_probe",
            lhs: vec![train_y.len(), test_y.len(), d],
            rhs: vec![train_x.len(), test_x.len()],
        });
    }
    let (mean, std) = feature_stats(train_x, d);
    let xtr = apply_stats(train_x, d, &mean, &std);
    let xte = apply_stats(test_x, d, &mean, &std);
    let mut store = ParamStore::new();
    let mut w = Tensor::zeros(&[d, CLASSES]).with_grad();
    w.decay = true;
    let wid = store.insert("probe.weight", w);
    let bid = store.insert("probe.bias", Tensor::zeros(&[CLASSES]).with_grad());
    let mut opt = AdamWState::new(&store, cfg.probe_lr, cfg.probe_weight_decay).with_betas(0.9, 0.999);
    let n = train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.probe_epochs {
        order.shuffle(&mut stream(seed, &[tag::PROBE, epoch as u64]));
        for chunk in order.chunks(cfg.probe_batch) {
            let xb: Vec<f32> = chunk.iter().flat_map(|&i| xtr[i * d..(i + 1) * d].iter().copied()).collect();
            let mut target = vec![0.0f32; chunk.len() * CLASSES];
            for (r, &i) in chunk.iter().enumerate() {
                target[r * CLASSES + train_y[i] as usize] = 1.0;
            }
            let mut tape = Tape::new();
            let x = tape.constant(vec![chunk.len(), d], xb)?;
            let wv = tape.param(&store, wid);
            let bv = tape.param(&store, bid);
            let logits = tape.matmul(x, wv)?;
            let logits = tape.add_bias(logits, bv)?;
            let p = tape.softmax_last(logits);
            let loss = tape.cross_entropy(p, &target, 1e-12)?;
            let grads = tape.backward(loss)?;
            tape.write_grads(&grads, &mut store);
            adamw_step(&mut store, &mut opt)?;
        }
    }
    let accuracy = |x: &[f32], y: &[u8]| -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let (wt, bt) = (store.get(wid).data(), store.get(bid).data());
        let correct = x
            .chunks_exact(d)
            .zip(y)
            .filter(|(row, &label)| {
                let logits: Vec<f32> = (0..CLASSES)
                    .map(|c| bt[c] + (0..d).map(|j| row[j] * wt[j * CLASSES + c]).sum::<f32>())
                    .collect();
                argmax(&logits) == label as usize
            })
            .count();
        correct as f64 / y.len() as f64
    };
    Ok(ProbeResult {
        train_acc: accuracy(&xtr, train_y),
        test_acc: accuracy(&xte, test_y),
    })
}

/// Majority label among the `k` most cosine-similar bank rows. Similarity
/// ties prefer the lower bank index, vote ties the smaller label.
/// `skip` removes one bank index from consideration.
pub fn knn_predict(bank: &[f32], bank_y: &[u8], query: &[f32], d: usize, k: usize, skip: Option<usize>) -> u8 {
    let norm = |r: &[f32]| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut sims: Vec<(f64, usize)> = bank
        .chunks_exact(d)
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, r)| {
            let bn = norm(r);
            let dot: f64 = r.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
            let s = if qn == 0.0 || bn == 0.0 { 0.0 } else { dot / (qn * bn) };
            (s, i)
        })
        .collect();
    let k = k.min(sims.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < sims.len() {
        sims.select_nth_unstable_by(k, cmp);
    }
    let mut votes = [0usize; 256];
    for &(_, i) in &sims[..k] {
        votes[bank_y[i] as usize] += 1;
    }
    let mut best = 0usize;
    for (label, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = label;
        }
    }
    best as u8
}

/// Top-1 accuracy of [`knn_predict`] over `query`. With `exclude_self`
/// the query set must be the bank and each query ignores its own row.
pub fn knn_eval(
    bank: &[f32],
    bank_y: &[u8],
    query: &[f32],
    query_y: &[u8],
    d: usize,
    k: usize,
    exclude_self: bool,
) -> Result<f64> {
    if bank.len() != bank_y.len() * d || query.len() != query_y.len() * d || k == 0 {
        return Err(Error::contract("knn_eval: inconsistent feature/label sizes or k = 0"));
    }
    if exclude_self && (bank.len() != query.len()) {
        return Err(Error::contract("knn_eval: self-exclusion needs the query set to be the bank"));
    }
    if query_y.is_empty() {
        return Ok(0.0);
    }
    let correct = query
        .chunks_exact(d)
        .zip(query_y)
        .enumerate()
        .filter(|(i, (q, &y))| knn_predict(bank, bank_y, q, d, k, exclude_self.then_some(*i)) == y)
        .count();
    Ok(correct as f64 / query_y.len() as f64)
}
