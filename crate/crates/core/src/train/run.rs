//! Run drivers behind the command-line subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::ParamStore;
use crate::data::cifar::{load_split, Split};
use crate::data::{epoch_batches, make_batch, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::vit::Encoder;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::{extract_features, knn_eval, linear_probe, ProbeResult};
use super::metrics::{MetricsRow, MetricsWriter};
use super::pipeline::Trainer;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const NAN_CHECKPOINT_FILE: &str = "nan_abort.ckpt";

fn limited(mut records: Vec<ImageRecord>, limit: Option<usize>) -> Vec<ImageRecord> {
    if let Some(n) = limit {
        records.truncate(n);
    }
    records
}

/// Training records of `data_dir`, truncated to `data.train_limit`.
pub fn load_train(cfg: &TrainConfig, data_dir: &Path) -> Result<Vec<ImageRecord>> {
    Ok(limited(load_split(data_dir, Split::Train)?, cfg.data.train_limit))
}

/// Test records of `data_dir`, truncated to `data.test_limit`.
pub fn load_test(cfg: &TrainConfig, data_dir: &Path) -> Result<Vec<ImageRecord>> {
    Ok(limited(load_split(data_dir, Split::Test)?, cfg.data.test_limit))
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Continue from this checkpoint; its config replaces the given one.
    pub resume: Option<PathBuf>,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after_epochs: Option<u64>,
    /// Build the projection head and pseudo-labelling teacher. `None`
    /// builds them whenever a pseudo-label weight is non-zero or the
    /// config is resumed from a checkpoint that has them.
    pub pseudo_branch: Option<bool>,
}

pub struct PretrainOutcome {
    pub trainer: Trainer,
    pub rows: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
}

/// Self-supervised pretraining over `records`, writing `metrics.csv` and
/// checkpoints into `out_dir`.
pub fn pretrain(cfg: &TrainConfig, records: &[ImageRecord], out_dir: &Path, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut tr = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let tr = Trainer::from_checkpoint(&ck, records.len())?;
            if tr.cfg != *cfg {
                log::warn!("resuming with the configuration stored in {}", path.display());
            }
            tr
        }
        None => {
            let branch = opts.pseudo_branch.unwrap_or(cfg.loss.uses_pseudo_labels());
            Trainer::new(cfg, records.len(), branch)?
        }
    };
    let cfg = tr.cfg.clone();
    let mut writer = MetricsWriter::open(out_dir, &cfg.to_toml(), opts.resume.is_some())?;
    let need_complex = cfg.loss.uses_pseudo_labels();
    let shape = tr.shape;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let started = Instant::now();
    let mut rows = Vec::new();
    log::info!(
        "pretraining {} records: {} iters/epoch, {} iters, {} epochs",
        shape.records,
        shape.iters_per_epoch,
        shape.total_iters,
        shape.epochs
    );

    let first_epoch = tr.global_iter / shape.iters_per_epoch;
    for epoch in first_epoch..shape.epochs {
        let batches = epoch_batches(records.len(), cfg.optim.batch_size, cfg.seed, epoch)?;
        let skip = (tr.global_iter - epoch * shape.iters_per_epoch) as usize;
        for (j, indices) in batches.iter().enumerate().skip(skip) {
            if tr.global_iter >= shape.total_iters {
                break;
            }
            let batch = make_batch(records, indices, cfg.seed, epoch, &cfg.data.augment, cfg.data.mode, need_complex)?;
            let end_of_epoch = j + 1 == batches.len() || tr.global_iter + 1 == shape.total_iters;
            let out = match tr.step(&batch, epoch, end_of_epoch) {
                Ok(o) => o,
                Err(e @ Error::Numeric(_)) => {
                    let path = out_dir.join(NAN_CHECKPOINT_FILE);
                    tr.to_checkpoint().save(&path)?;
                    log::error!("{e}; state before the failing step saved to {}", path.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let (m_rec, m_cl) = tr.teachers.momenta();
            let r = &out.report;
            let row = MetricsRow {
                epoch,
                iter: tr.global_iter,
                loss_m: r.loss_m,
                loss_c: r.loss_c,
                loss_p: r.loss_p,
                total: r.total,
                patch_entropy: r.patch_entropy,
                class_entropy: r.class_entropy,
                m_rec,
                m_cl,
                lr: out.lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            if tr.global_iter % cfg.log_every == 0 || tr.global_iter == shape.total_iters {
                writer.write(&row)?;
                log::debug!("{}", r);
            }
            rows.push(row);
        }
        log::info!("epoch {epoch} done at iter {}", tr.global_iter);
        if cfg.checkpoint_every_epoch {
            tr.to_checkpoint().save(&ckpt_path)?;
        }
        if opts.stop_after_epochs == Some(tr.epochs_done) {
            break;
        }
    }
    tr.to_checkpoint().save(&ckpt_path)?;
    Ok(PretrainOutcome {
        trainer: tr,
        rows,
        checkpoint: ckpt_path,
    })
}

/// Student encoder stored in a checkpoint, with the checkpoint's config.
pub fn encoder_from_checkpoint(path: &Path) -> Result<(TrainConfig, Encoder, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let cfg = TrainConfig::from_toml(&ck.config)?;
    let (encoder, mut store) = random_encoder(&cfg);
    ck.restore_store("student.encoder", &mut store)?;
    Ok((cfg, encoder, store))
}

/// Encoder at its seeded initialization, identical to the student before
/// the first step.
pub fn random_encoder(cfg: &TrainConfig) -> (Encoder, ParamStore) {
    Encoder::new(&cfg.model, &mut stream(cfg.seed, &[tag::INIT_ENCODER]))
}

fn labels(records: &[ImageRecord]) -> Vec<u8> {
    records.iter().map(|r| r.label).collect()
}

/// Linear probe of `encoder` on frozen class-token features: fit on
/// `train`, score on `test`.
pub fn probe_encoder(
    cfg: &TrainConfig,
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ImageRecord],
    test: &[ImageRecord],
) -> Result<ProbeResult> {
    let e = &cfg.eval;
    let xtr = extract_features(encoder, store, train, &cfg.data.augment, e.feature_batch)?;
    let xte = extract_features(encoder, store, test, &cfg.data.augment, e.feature_batch)?;
    linear_probe(&xtr, &labels(train), &xte, &labels(test), cfg.model.embed_dim, e, cfg.seed)
}

/// k-NN top-1 accuracy of `test` against a bank built from `train`.
pub fn knn_encoder(
    cfg: &TrainConfig,
    encoder: &Encoder,
    store: &ParamStore,
    train: &[ImageRecord],
    test: &[ImageRecord],
) -> Result<f64> {
    let e = &cfg.eval;
    let bank = extract_features(encoder, store, train, &cfg.data.augment, e.feature_batch)?;
    if e.knn_exclude_self {
        return knn_eval(&bank, &labels(train), &bank, &labels(train), cfg.model.embed_dim, e.knn_k, true);
    }
    let query = extract_features(encoder, store, test, &cfg.data.augment, e.feature_batch)?;
    knn_eval(&bank, &labels(train), &query, &labels(test), cfg.model.embed_dim, e.knn_k, false)
}
