use rand::Rng;

use super::config::ViTConfig;
use super::layers::{drop_path_gates, sincos_2d, Block, LayerNorm, Linear};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::trunc_normal;

/// A batch of equally long patch-token sequences, each row tagged with the
/// index of the patch it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub count: usize,
    pub dim: usize,
    /// `[batch * count, dim]`
    pub data: Vec<f32>,
    /// `[batch * count]` source patch index of every row.
    pub positions: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, count: usize, dim: usize, data: Vec<f32>, positions: Vec<usize>) -> Result<Self> {
        if data.len() != batch * count * dim || positions.len() != batch * count {
            return Err(Error::Dimension {
                op: "token_batch",
                lhs: vec![batch, count, dim],
                rhs: vec![data.len(), positions.len()],
            });
        }
        if count == 0 || batch == 0 {
            return Err(Error::contract("token batch needs at least one visible token"));
        }
        Ok(Self {
            batch,
            count,
            dim,
            data,
            positions,
        })
    }

    pub fn positions_of(&self, b: usize) -> &[usize] {
        &self.positions[b * self.count..(b + 1) * self.count]
    }
}

/// Encoder output: `[batch * seq, D]` with the class token in row 0 of each
/// sequence and `positions[b][i]` the patch index of row `i + 1`.
#[derive(Debug, Clone)]
pub struct EncodedTokens {
    pub tokens: Var,
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub positions: Vec<Vec<usize>>,
}

impl EncodedTokens {
    pub fn class_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }

    pub fn patch_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (1..self.seq).map(move |i| b * self.seq + i))
            .collect()
    }
}

/// Sparse ViT encoder: only the tokens it is given are ever materialized.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pos_embed: Vec<f32>,
}

impl Encoder {
    pub fn new<R: Rng>(config: &ViTConfig, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let patch_embed = Linear::new(&mut store, "encoder.patch_embed", config.patch_dim(), d, rng);
        let cls = Tensor::new(vec![1, d], trunc_normal(rng, d, 0.02)).expect("cls").with_grad();
        let cls_token = store.insert("encoder.cls_token", cls);
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("encoder.blocks.{i}"),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut store, "encoder.norm", d);
        let enc = Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            blocks,
            norm,
            pos_embed: sincos_2d(d, config.grid()),
        };
        (enc, store)
    }

    pub fn pos_embed(&self) -> &[f32] {
        &self.pos_embed
    }

    /// Encodes `input` with the class token prepended to every sequence.
    /// Drop path is applied only when `drop_rng` is given.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &TokenBatch,
        drop_rng: Option<&mut R>,
    ) -> Result<EncodedTokens> {
        self.forward_captured(tape, store, input, drop_rng).map(|(e, _)| e)
    }

    /// Like [`Encoder::forward`], also returning every block's output.
    pub fn forward_captured<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &TokenBatch,
        drop_rng: Option<&mut R>,
    ) -> Result<(EncodedTokens, Vec<Var>)> {
        let cfg = &self.config;
        let (b, t, d) = (input.batch, input.count, cfg.embed_dim);
        if input.dim != cfg.patch_dim() {
            return Err(Error::Dimension {
                op: "encoder_forward",
                lhs: vec![input.dim],
                rhs: vec![cfg.patch_dim()],
            });
        }
        let n = cfg.num_patches();
        if let Some(&bad) = input.positions.iter().find(|&&p| p >= n) {
            return Err(Error::contract(format!(
                "patch index {bad} out of range for {n} patches"
            )));
        }
        let x = tape.constant(vec![b * t, input.dim], input.data.clone())?;
        let x = self.patch_embed.forward(tape, store, x)?;
        let mut pos = Vec::with_capacity(b * t * d);
        for &p in &input.positions {
            pos.extend_from_slice(&self.pos_embed[p * d..(p + 1) * d]);
        }
        let pos = tape.constant(vec![b * t, d], pos)?;
        let x = tape.add(x, pos)?;

        // The class token carries a zero position embedding.
        let cls = tape.param(store, self.cls_token);
        let stacked = tape.concat_rows(&[cls, x])?;
        let seq = t + 1;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| std::iter::once(0).chain((0..t).map(move |j| 1 + i * t + j)))
            .collect();
        let mut h = tape.index_rows(stacked, &order)?;

        let gates = drop_path_gates(cfg.drop_path_rate, self.blocks.len(), b, drop_rng);
        let mut captured = Vec::with_capacity(self.blocks.len());
        for (block, g) in self.blocks.iter().zip(&gates) {
            h = block.forward(tape, store, h, b, seq, [&g[0], &g[1]])?;
            captured.push(h);
        }
        let h = match &cfg.hierarchical_layers {
            None => h,
            Some(layers) => {
                let mut acc = captured[layers[0] - 1];
                for &l in &layers[1..] {
                    acc = tape.add(acc, captured[l - 1])?;
                }
                acc
            }
        };
        let out = self.norm.forward(tape, store, h)?;
        let positions = (0..b).map(|i| input.positions_of(i).to_vec()).collect();
        Ok((
            EncodedTokens {
                tokens: out,
                batch: b,
                seq,
                dim: d,
                positions,
            },
            captured,
        ))
    }
}

/// RNG type to name in `None::<&mut NoDrop>` when drop path is off.
pub type NoDrop = rand_chacha::ChaCha8Rng;
