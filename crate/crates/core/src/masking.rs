//! Random token masking and the K-way fold partition of masked tokens.
//!
//! Polarity: `m[i] == 1` means patch `i` is masked, i.e. hidden from the
//! student encoder. The student sees the visible set; the teachers see the
//! masked set, split into folds that are encoded as separate sequences.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::Patches;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub ratio: f64,
    /// Number of teacher folds K.
    pub folds: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            folds: 3,
        }
    }
}

pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

impl MaskingConfig {
    /// Rejects geometries where the masked count cannot be split evenly.
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        let (n, r, k) = (num_patches, self.ratio, self.folds);
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::config(format!("masking ratio {r} must lie in (0, 1)")));
        }
        let masked = masked_count(n, r);
        if k == 0 || masked == 0 || masked == n || masked % k != 0 {
            return Err(Error::config(format!(
                "N={n}, ratio={r} masks {masked} tokens, which does not split into K={k} equal folds \
                 with at least one visible token"
            )));
        }
        Ok(())
    }

    pub fn fold_len(&self, num_patches: usize) -> usize {
        masked_count(num_patches, self.ratio) / self.folds
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// `1` = masked, `0` = visible.
    pub m: Vec<u8>,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskSpec {
    pub fn from_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&i| i >= n) {
            return Err(Error::contract(format!("masked index out of range for N={n}")));
        }
        let mut m = vec![0u8; n];
        for &i in &masked {
            m[i] = 1;
        }
        let visible = (0..n).filter(|&i| m[i] == 0).collect();
        Ok(Self { m, visible, masked })
    }

    pub fn num_patches(&self) -> usize {
        self.m.len()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.m.len() as f64
    }
}

/// Masks a uniformly random subset of `round(ratio * n)` patches.
pub fn gen_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("masking ratio {ratio} must lie in (0, 1)")));
    }
    let k = masked_count(n, ratio);
    let masked = rand::seq::index::sample(rng, n, k).into_vec();
    MaskSpec::from_masked(n, masked)
}

/// The masked set partitioned into K equally sized folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSet {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSet {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_len(&self) -> usize {
        self.folds.first().map_or(0, Vec::len)
    }

    /// `(fold, row)` for every masked patch index, or `None` for visible ones.
    pub fn locate(&self, n: usize) -> Vec<Option<(usize, usize)>> {
        let mut at = vec![None; n];
        for (k, fold) in self.folds.iter().enumerate() {
            for (i, &p) in fold.iter().enumerate() {
                at[p] = Some((k, i));
            }
        }
        at
    }

    /// Checks that the folds partition exactly `mask.masked`.
    pub fn check_against(&self, mask: &MaskSpec) -> Result<()> {
        let mut all: Vec<usize> = self.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        if all != mask.masked {
            return Err(Error::contract("folds do not partition the masked set"));
        }
        if self.folds.iter().any(|f| f.len() != self.fold_len()) {
            return Err(Error::contract("folds have unequal lengths"));
        }
        Ok(())
    }
}

/// Shuffles the masked indices and cuts them into `k` contiguous groups.
pub fn split_folds<R: Rng + ?Sized>(mask: &MaskSpec, k: usize, rng: &mut R) -> Result<FoldSet> {
    let count = mask.masked.len();
    if k == 0 || count % k != 0 {
        return Err(Error::config(format!(
            "{count} masked tokens cannot be split into K={k} equal folds"
        )));
    }
    let mut order = mask.masked.clone();
    order.shuffle(rng);
    let len = count / k;
    Ok(FoldSet {
        folds: order.chunks(len).map(<[usize]>::to_vec).collect(),
    })
}

/// Rows of `patches` named by `fold`, in fold order.
pub fn gather_fold_patches(patches: &Patches, fold: &[usize]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(fold.len() * patches.dim);
    for &i in fold {
        if i >= patches.count {
            return Err(Error::contract(format!(
                "patch index {i} out of range for {} patches",
                patches.count
            )));
        }
        out.extend_from_slice(patches.row(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn imagenet_fold_arithmetic() {
        let cfg = MaskingConfig { ratio: 0.75, folds: 3 };
        cfg.validate(196).unwrap();
        let mask = gen_mask(196, 0.75, &mut stream(0, &[])).unwrap();
        assert_eq!((mask.masked.len(), mask.visible.len()), (147, 49));
        let folds = split_folds(&mask, 3, &mut stream(1, &[])).unwrap();
        assert_eq!(folds.k(), 3);
        assert!(folds.folds.iter().all(|f| f.len() == 49));
        folds.check_against(&mask).unwrap();
    }

    #[test]
    fn cifar_fold_arithmetic() {
        let cfg = MaskingConfig::default();
        cfg.validate(64).unwrap();
        assert_eq!(cfg.fold_len(64), 16);
        let mask = gen_mask(64, 0.75, &mut stream(0, &[])).unwrap();
        assert_eq!((mask.masked.len(), mask.visible.len()), (48, 16));
        let folds = split_folds(&mask, 3, &mut stream(1, &[])).unwrap();
        assert!(folds.folds.iter().all(|f| f.len() == 16));
    }

    #[test]
    fn indivisible_configs_are_rejected() {
        for (n, ratio, k) in [(64, 0.75, 5), (196, 0.75, 2), (64, 0.0, 3), (64, 1.0, 3), (10, 0.5, 3)] {
            let err = MaskingConfig { ratio, folds: k }.validate(n).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            if ratio > 0.0 && ratio < 1.0 {
                let msg = err.to_string();
                assert!(msg.contains(&format!("N={n}")) && msg.contains(&format!("K={k}")), "{msg}");
            }
        }
        let mask = gen_mask(64, 0.75, &mut stream(0, &[])).unwrap();
        assert!(matches!(split_folds(&mask, 5, &mut stream(0, &[])), Err(Error::Config(_))));
    }

    #[test]
    fn single_fold_is_the_masked_set() {
        let mask = gen_mask(64, 0.75, &mut stream(4, &[])).unwrap();
        let folds = split_folds(&mask, 1, &mut stream(5, &[])).unwrap();
        let mut f = folds.folds[0].clone();
        f.sort_unstable();
        assert_eq!(f, mask.masked);
    }

    #[test]
    fn same_seed_same_mask() {
        let a = gen_mask(64, 0.75, &mut stream(9, &[1])).unwrap();
        let b = gen_mask(64, 0.75, &mut stream(9, &[1])).unwrap();
        assert_eq!(a, b);
        let fa = split_folds(&a, 3, &mut stream(9, &[2])).unwrap();
        let fb = split_folds(&b, 3, &mut stream(9, &[2])).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn mask_frequency_is_uniform() {
        let mut counts = [0u32; 64];
        let mut rng = stream(77, &[]);
        let draws = 10_000;
        for _ in 0..draws {
            for i in gen_mask(64, 0.75, &mut rng).unwrap().masked {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.75).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn gather_rows_and_rescatter() {
        let patches = Patches {
            count: 8,
            dim: 3,
            data: (0..24).map(|v| v as f32 * 1.25).collect(),
        };
        assert_eq!(gather_fold_patches(&patches, &[0]).unwrap(), patches.row(0));
        let fold = [5, 2, 7];
        let rows = gather_fold_patches(&patches, &fold).unwrap();
        let mut back = patches.data.clone();
        back.iter_mut().for_each(|v| *v = f32::NAN);
        for (r, &i) in fold.iter().enumerate() {
            back[i * 3..(i + 1) * 3].copy_from_slice(&rows[r * 3..(r + 1) * 3]);
        }
        for &i in &fold {
            assert_eq!(&back[i * 3..(i + 1) * 3], patches.row(i));
        }
        assert!(matches!(gather_fold_patches(&patches, &[8]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn folds_partition_masked_set(n in 4usize..200, k in 1usize..5, seed in any::<u64>()) {
            let cfg = MaskingConfig { ratio: 0.75, folds: k };
            prop_assume!(cfg.validate(n).is_ok());
            let mut rng = stream(seed, &[]);
            let mask = gen_mask(n, 0.75, &mut rng).unwrap();
            let folds = split_folds(&mask, k, &mut rng).unwrap();
            folds.check_against(&mask).unwrap();
            let total: usize = folds.folds.iter().map(Vec::len).sum();
            prop_assert_eq!(total, mask.masked.len());
            prop_assert_eq!(total, n - mask.visible.len());
            prop_assert!(mask.visible.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(mask.masked.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
