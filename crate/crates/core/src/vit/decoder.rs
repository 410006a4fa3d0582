use rand::Rng;

use super::config::ViTConfig;
use super::encoder::EncodedTokens;
use super::layers::{sincos_2d, Block, BranchGate, LayerNorm, Linear};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::rng::trunc_normal;

/// Decoder that reinserts a learned mask token at every masked position,
/// runs the full-length sequence and projects back to the encoder width.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: ViTConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
    pos_embed: Vec<f32>,
}

impl Decoder {
    pub fn new<R: Rng>(config: &ViTConfig, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let (d, dd) = (config.embed_dim, config.decoder_dim);
        let embed = Linear::new(&mut store, "decoder.embed", d, dd, rng);
        let mt = Tensor::new(vec![1, dd], trunc_normal(rng, dd, 0.02)).expect("mask token").with_grad();
        let mask_token = store.insert("decoder.mask_token", mt);
        let blocks = (0..config.decoder_depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &format!("decoder.blocks.{i}"),
                    dd,
                    config.decoder_heads,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut store, "decoder.norm", dd);
        let pred = Linear::new(&mut store, "decoder.pred", dd, d, rng);
        let dec = Self {
            config: config.clone(),
            embed,
            mask_token,
            blocks,
            norm,
            pred,
            pos_embed: sincos_2d(dd, config.grid()),
        };
        (dec, store)
    }

    /// Returns `[batch * (N + 1), D]`: class row then one row per patch in
    /// patch order, for every sequence.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &EncodedTokens,
        masks: &[MaskSpec],
    ) -> Result<Var> {
        let n = self.config.num_patches();
        let dd = self.config.decoder_dim;
        let b = encoded.batch;
        if masks.len() != b {
            return Err(Error::contract(format!(
                "{} masks for a batch of {b}",
                masks.len()
            )));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.num_patches() != n || encoded.positions[i] != m.visible {
                return Err(Error::contract(format!(
                    "encoded rows of sequence {i} do not cover the visible set of its mask"
                )));
            }
        }
        let x = self.embed.forward(tape, store, encoded.tokens)?;
        let mask_tok = tape.param(store, self.mask_token);
        let stacked = tape.concat_rows(&[x, mask_tok])?;
        let mask_row = b * encoded.seq;
        let mut order = Vec::with_capacity(b * (n + 1));
        for (i, m) in masks.iter().enumerate() {
            let base = i * encoded.seq;
            order.push(base);
            let mut next_visible = 1;
            for p in 0..n {
                if m.m[p] == 0 {
                    order.push(base + next_visible);
                    next_visible += 1;
                } else {
                    order.push(mask_row);
                }
            }
        }
        let full = tape.index_rows(stacked, &order)?;
        let mut pos = Vec::with_capacity(b * (n + 1) * dd);
        for _ in 0..b {
            pos.extend(std::iter::repeat_n(0.0, dd));
            pos.extend_from_slice(&self.pos_embed);
        }
        let pos = tape.constant(vec![b * (n + 1), dd], pos)?;
        let mut h = tape.add(full, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, b, n + 1, [&BranchGate::Keep, &BranchGate::Keep])?;
        }
        let h = self.norm.forward(tape, store, h)?;
        self.pred.forward(tape, store, h)
    }
}
