use rand::Rng;

use super::config::ProjectionHeadConfig;
use super::encoder::EncodedTokens;
use super::layers::{Linear, NormedLinear};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;

const FEATURE_EPS: f32 = 1e-12;

/// Shared linear+GELU trunk, L2-normalized feature, then one output layer
/// for class tokens and an independent one for patch tokens.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub config: ProjectionHeadConfig,
    pub trunk: Vec<Linear>,
    pub class_last: OutputLayer,
    pub patch_last: OutputLayer,
}

#[derive(Debug, Clone)]
pub enum OutputLayer {
    Plain(Linear),
    Normed(NormedLinear),
}

impl OutputLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, normed: bool, rng: &mut R) -> Self {
        if normed {
            Self::Normed(NormedLinear::new(store, name, in_dim, out_dim, rng))
        } else {
            Self::Plain(Linear::new(store, name, in_dim, out_dim, rng))
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Self::Plain(l) => l.forward(tape, store, x),
            Self::Normed(l) => l.forward(tape, store, x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[class rows, output_dim]`
    pub class_scores: Var,
    /// `[patch rows, output_dim]`
    pub patch_scores: Var,
    /// Normalized trunk features of every input row (class rows first).
    pub features: Var,
}

impl ProjectionHead {
    pub fn new<R: Rng>(config: &ProjectionHeadConfig, in_dim: usize, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let trunk = (0..config.num_shared_layers)
            .map(|i| {
                let input = if i == 0 { in_dim } else { h };
                Linear::new(&mut store, &format!("head.trunk.{i}"), input, h, rng)
            })
            .collect();
        let normed = config.norm_last_layer;
        let class_last = OutputLayer::new(&mut store, "head.class_last", h, config.output_dim, normed, rng);
        let patch_last = OutputLayer::new(&mut store, "head.patch_last", h, config.output_dim, normed, rng);
        (
            Self {
                config: config.clone(),
                trunk,
                class_last,
                patch_last,
            },
            store,
        )
    }

    /// Shared trunk followed by row-wise L2 normalization.
    pub fn trunk_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(tape, store, h)?;
            h = tape.gelu(h);
        }
        Ok(tape.l2_normalize_rows(h, FEATURE_EPS))
    }

    /// Runs the trunk once over `[class_rows; patch_rows]` and routes each
    /// part through its own output layer. Either part may be absent.
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        class_rows: Option<Var>,
        patch_rows: Option<Var>,
    ) -> Result<(Option<Var>, Option<Var>, Var)> {
        let parts: Vec<Var> = class_rows.iter().chain(patch_rows.iter()).copied().collect();
        let x = tape.concat_rows(&parts)?;
        let feats = self.trunk_forward(tape, store, x)?;
        let nc = class_rows.map_or(0, |c| tape.shape(c)[0]);
        let np = patch_rows.map_or(0, |p| tape.shape(p)[0]);
        let class_scores = match class_rows {
            Some(_) => {
                let idx: Vec<usize> = (0..nc).collect();
                let f = tape.index_rows(feats, &idx)?;
                Some(self.class_last.forward(tape, store, f)?)
            }
            None => None,
        };
        let patch_scores = match patch_rows {
            Some(_) => {
                let idx: Vec<usize> = (nc..nc + np).collect();
                let f = tape.index_rows(feats, &idx)?;
                Some(self.patch_last.forward(tape, store, f)?)
            }
            None => None,
        };
        Ok((class_scores, patch_scores, feats))
    }

    /// Class token of every sequence through the class branch, all other
    /// rows through the patch branch.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &EncodedTokens) -> Result<HeadOutput> {
        let cls = tape.index_rows(tokens.tokens, &tokens.class_rows())?;
        let patches = tape.index_rows(tokens.tokens, &tokens.patch_rows())?;
        let (c, p, features) = self.forward_rows(tape, store, Some(cls), Some(patches))?;
        Ok(HeadOutput {
            class_scores: c.expect("class part"),
            patch_scores: p.expect("patch part"),
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn normed_scores_are_cosines() {
        let cfg = ProjectionHeadConfig {
            num_shared_layers: 1,
            hidden_dim: 8,
            output_dim: 6,
            norm_last_layer: true,
        };
        let mut rng = stream(3, &[1]);
        let (head, store) = ProjectionHead::new(&cfg, 4, &mut rng);
        let mut tape = Tape::no_grad();
        let x: Vec<f32> = (0..20).map(|i| (i as f32 * 0.7).sin() * 5.0).collect();
        let x = tape.constant(vec![5, 4], x).unwrap();
        let (_, p, _) = head.forward_rows(&mut tape, &store, None, Some(x)).unwrap();
        let p = p.unwrap();
        assert_eq!(tape.shape(p), &[5, 6]);
        assert!(tape.value(p).iter().all(|v| v.abs() <= 1.0 + 1e-5));
        assert!(store.find("head.patch_last.bias").is_none());
    }
}
