//! Dataset ingestion, view generation and epoch sampling.

pub mod augment;
pub mod cifar;
pub mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use augment::{complex_augment, simple_augment, AugmentConfig};
pub use cifar::{load_cifar10, load_split, ImageRecord, Split};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Simple view for the student and reconstruction teacher, complex view
    /// for the pseudo-labelling teacher.
    Dual,
    /// Both views from the simple pipeline, drawn independently.
    SimpleOnly,
}

/// Two views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedViews {
    pub simple: Image,
    pub complex: Option<Image>,
    pub source: usize,
    pub label: u8,
}

/// Views of record `source` for `epoch`. Each view has its own stream keyed
/// by `(seed, epoch, source)`, so a view never depends on batch layout or on
/// whether the other view was produced.
pub fn make_views(
    record: &ImageRecord,
    source: usize,
    seed: u64,
    epoch: u64,
    cfg: &AugmentConfig,
    mode: AugmentMode,
    with_complex: bool,
) -> AugmentedViews {
    let img = record.to_image();
    let key = [epoch, source as u64];
    let simple = simple_augment(&img, cfg, &mut stream(seed, &[tag::SIMPLE_VIEW, key[0], key[1]]));
    let complex = with_complex.then(|| {
        let mut rng = stream(seed, &[tag::COMPLEX_VIEW, key[0], key[1]]);
        match mode {
            AugmentMode::Dual => complex_augment(&img, cfg, &mut rng),
            AugmentMode::SimpleOnly => simple_augment(&img, cfg, &mut rng),
        }
    });
    AugmentedViews {
        simple,
        complex,
        source,
        label: record.label,
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::EPOCH_ORDER, epoch]));
    order
}

/// Full batches of one epoch; a trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!("batch size {batch_size} does not fit a dataset of {n} records")));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub views: Vec<AugmentedViews>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.source).collect()
    }
}

pub fn make_batch(
    records: &[ImageRecord],
    indices: &[usize],
    seed: u64,
    epoch: u64,
    cfg: &AugmentConfig,
    mode: AugmentMode,
    with_complex: bool,
) -> Result<Batch> {
    let views = indices
        .iter()
        .map(|&i| {
            let r = records
                .get(i)
                .ok_or_else(|| Error::contract(format!("record {i} out of range for {}", records.len())))?;
            Ok(make_views(r, i, seed, epoch, cfg, mode, with_complex))
        })
        .collect::<Result<_>>()?;
    Ok(Batch { views })
}
