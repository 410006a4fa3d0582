use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::trunc_normal;

pub const LN_EPS: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut w = Tensor::new(vec![in_dim, out_dim], trunc_normal(rng, in_dim * out_dim, INIT_STD))
            .expect("linear weight")
            .with_grad();
        w.decay = true;
        let weight = store.insert(format!("{name}.weight"), w);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]).with_grad());
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x` is `[rows, in_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// `y = x V` where each column of `V` is the matching column of the
/// stored weight scaled to unit length. No bias.
#[derive(Debug, Clone)]
pub struct NormedLinear {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl NormedLinear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut w = Tensor::new(vec![in_dim, out_dim], trunc_normal(rng, in_dim * out_dim, INIT_STD))
            .expect("linear weight")
            .with_grad();
        w.decay = true;
        let weight = store.insert(format!("{name}.weight"), w);
        Self { weight, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let cols = tape.permute(w, &[1, 0])?;
        let cols = tape.l2_normalize_rows(cols, 1e-12);
        let v = tape.permute(cols, &[1, 0])?;
        tape.matmul(x, v)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.weight"), Tensor::filled(&[dim], 1.0).with_grad()),
            beta: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]).with_grad()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

/// Multi-head self-attention over `batch` sequences of `seq` tokens each.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
        }
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let x = tape.reshape(x, vec![batch, seq, self.heads, hd])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, vec![batch * self.heads, seq, hd])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let q = self.split_heads(tape, q, batch, seq)?;
        let k = self.split_heads(tape, k, batch, seq)?;
        let v = self.split_heads(tape, v, batch, seq)?;
        let scores = tape.bmm(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (hd as f32).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = tape.bmm(attn, v, false, false)?;
        let ctx = tape.reshape(ctx, vec![batch, self.heads, seq, hd])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![batch * seq, dim])?;
        self.proj.forward(tape, store, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// What to do with one residual branch of one block.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchGate {
    Keep,
    /// Skip the branch entirely (drop rate 1).
    Skip,
    /// Per-sequence factors: `0` drops the branch, `1/keep` keeps it.
    Scale(Vec<f32>),
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        gates: [&BranchGate; 2],
    ) -> Result<Var> {
        let x = match gates[0] {
            BranchGate::Skip => x,
            gate => {
                let h = self.norm1.forward(tape, store, x)?;
                let h = self.attn.forward(tape, store, h, batch, seq)?;
                let h = gated(tape, h, gate, batch)?;
                tape.add(x, h)?
            }
        };
        match gates[1] {
            BranchGate::Skip => Ok(x),
            gate => {
                let h = self.norm2.forward(tape, store, x)?;
                let h = self.mlp.forward(tape, store, h)?;
                let h = gated(tape, h, gate, batch)?;
                tape.add(x, h)
            }
        }
    }
}

fn gated(tape: &mut Tape, h: Var, gate: &BranchGate, batch: usize) -> Result<Var> {
    match gate {
        BranchGate::Scale(f) => {
            let shape = tape.shape(h).to_vec();
            let width = shape.iter().product::<usize>() / batch;
            let r = tape.reshape(h, vec![batch, width])?;
            let r = tape.scale_groups(r, f.clone())?;
            tape.reshape(r, shape)
        }
        _ => Ok(h),
    }
}

/// Per-block, per-branch drop-path gates for `batch` sequences. Without an
/// RNG (evaluation) every branch is kept.
pub fn drop_path_gates<R: Rng>(rate: f32, blocks: usize, batch: usize, rng: Option<&mut R>) -> Vec<[BranchGate; 2]> {
    let keep = 1.0 - rate;
    match rng {
        None => vec![[BranchGate::Keep, BranchGate::Keep]; blocks],
        _ if rate <= 0.0 => vec![[BranchGate::Keep, BranchGate::Keep]; blocks],
        _ if keep <= 0.0 => vec![[BranchGate::Skip, BranchGate::Skip]; blocks],
        Some(rng) => (0..blocks)
            .map(|_| {
                let mut draw = || {
                    BranchGate::Scale(
                        (0..batch)
                            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                            .collect(),
                    )
                };
                [draw(), draw()]
            })
            .collect(),
    }
}

/// Fixed 2-D sine-cosine table for a `grid x grid` patch layout; the first
/// half of the width encodes the patch row, the second half the column.
pub fn sincos_2d(dim: usize, grid: usize) -> Vec<f32> {
    assert!(dim % 4 == 0, "sincos width must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin() as f32));
                out.extend(omega.iter().map(|w| (pos * w).cos() as f32));
            }
        }
    }
    out
}
