use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, AugmentMode};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::MaskingConfig;
use crate::pseudo_label::PseudoLabelConfig;
use crate::teachers::EmaSchedule;
use crate::vit::{ProjectionHeadConfig, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Separate reconstruction and pseudo-labelling teachers.
    Dual,
    /// One teacher produces both target streams.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub reconstruction: EmaSchedule,
    pub pseudo_labeling: EmaSchedule,
    /// Schedule of the lone teacher in single mode.
    pub single: EmaSchedule,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Dual,
            reconstruction: EmaSchedule::reconstruction(),
            pseudo_labeling: EmaSchedule::pseudo_labeling(),
            single: EmaSchedule::reconstruction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate after warmup.
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub warmup_epochs: u64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Stops training after this many iterations; schedules are laid out
    /// over the truncated length.
    pub max_iters: Option<u64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            warmup_epochs: 5,
            epochs: 20,
            batch_size: 128,
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub augment: AugmentConfig,
    pub mode: AugmentMode,
    /// Use only the first `n` training records.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test records for evaluation.
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            mode: AugmentMode::Dual,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub probe_lr: f32,
    pub probe_batch: usize,
    pub probe_weight_decay: f32,
    pub knn_k: usize,
    pub knn_exclude_self: bool,
    pub feature_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_epochs: 50,
            probe_lr: 1e-2,
            probe_batch: 256,
            probe_weight_decay: 0.0,
            knn_k: 20,
            knn_exclude_self: false,
            feature_batch: 256,
        }
    }
}

/// Everything a run needs. Serialized verbatim into checkpoints and
/// metrics headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Pseudo-labelling teacher sees the masked tokens split into folds;
    /// when off it sees all of them as one sequence.
    pub multifold_pseudo_labeling: bool,
    /// Write a metrics row every this many iterations.
    pub log_every: u64,
    /// Save a checkpoint at the end of every epoch.
    pub checkpoint_every_epoch: bool,
    pub model: ViTConfig,
    pub head: ProjectionHeadConfig,
    pub masking: MaskingConfig,
    pub teachers: TeacherConfig,
    pub loss: LossWeights,
    pub pseudo: PseudoLabelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            multifold_pseudo_labeling: true,
            log_every: 1,
            checkpoint_every_epoch: true,
            model: ViTConfig::default(),
            head: ProjectionHeadConfig::default(),
            masking: MaskingConfig::default(),
            teachers: TeacherConfig::default(),
            loss: LossWeights::default(),
            pseudo: PseudoLabelConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// A model small enough to train a few iterations in well under a
    /// second: 8x8 patches, width 16, one block each side.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.model = ViTConfig {
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            decoder_depth: 1,
            decoder_dim: 16,
            decoder_heads: 2,
            ..ViTConfig::default()
        };
        c.head = ProjectionHeadConfig {
            num_shared_layers: 2,
            hidden_dim: 32,
            output_dim: 32,
            ..Default::default()
        };
        c.masking.folds = 3;
        c.optim.batch_size = 4;
        c.optim.epochs = 2;
        c.optim.warmup_epochs = 1;
        c.eval.probe_epochs = 5;
        c.eval.knn_k = 5;
        c
    }

    /// Checks the whole configuration; nothing is allocated before this.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.head.validate()?;
        self.masking.validate(self.model.num_patches())?;
        for s in [&self.teachers.reconstruction, &self.teachers.pseudo_labeling, &self.teachers.single] {
            s.validate()?;
        }
        self.loss.validate()?;
        self.pseudo.validate()?;
        self.data.augment.validate()?;
        if self.model.in_chans != 3 {
            return Err(Error::config("the image pipeline produces 3-channel views; model.in_chans must be 3"));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(Error::config("optim.lr and optim.weight_decay must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optim betas must lie in [0, 1)"));
        }
        if o.epochs == 0 || o.batch_size == 0 || o.warmup_epochs > o.epochs {
            return Err(Error::config(format!(
                "need epochs >= 1, batch_size >= 1 and warmup_epochs <= epochs (got {}, {}, {})",
                o.epochs, o.batch_size, o.warmup_epochs
            )));
        }
        if o.max_iters == Some(0) || self.log_every == 0 {
            return Err(Error::config("optim.max_iters and log_every must be positive"));
        }
        if self.eval.knn_k == 0 || self.eval.probe_batch == 0 || self.eval.feature_batch == 0 {
            return Err(Error::config("eval.knn_k, eval.probe_batch and eval.feature_batch must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Layers the file at `path` (if any) and then `key = value` overrides
    /// with dotted keys over the defaults, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::default().layered(path, overrides)
    }

    /// Like [`TrainConfig::load`], but layered over `self` instead of the
    /// defaults.
    pub fn layered(&self, path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = self.to_toml().parse().expect("config parses");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn dotted_overrides() {
        let c = TrainConfig::load(
            None,
            &ov(&[
                ("loss.lambda_c", "0"),
                ("teachers.mode", "single"),
                ("model.hierarchical_layers", "[2, 4]"),
                ("optim.max_iters", "7"),
                ("teachers.pseudo_labeling.frequency", "per_epoch"),
            ]),
        )
        .unwrap();
        assert_eq!(c.loss.lambda_c, 0.0);
        assert_eq!(c.teachers.mode, TeacherMode::Single);
        assert_eq!(c.model.hierarchical_layers, Some(vec![2, 4]));
        assert_eq!(c.optim.max_iters, Some(7));
        assert_eq!(c.teachers.pseudo_labeling.start, 0.996);
    }

    #[test]
    fn unknown_keys_and_bad_geometry_are_config_errors() {
        for o in [
            ov(&[("loss.lambda_x", "1")]),
            ov(&[("nonsense", "1")]),
            ov(&[("masking.folds", "5")]),
            ov(&[("model.patch_size", "5")]),
            ov(&[("optim.warmup_epochs", "50")]),
        ] {
            let err = TrainConfig::load(None, &o).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{err}");
        }
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[optim]\nbatch_size = 16\n").unwrap();
        let c = TrainConfig::load(Some(&p), &ov(&[("optim.batch_size", "32")])).unwrap();
        assert_eq!((c.seed, c.optim.batch_size), (5, 32));
    }
}
