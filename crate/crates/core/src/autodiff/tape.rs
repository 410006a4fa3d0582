//! Define-by-run reverse-mode tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

mod reference;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f32, shift: f32 },
    AddBias { x: Var, bias: Var },
    ScaleGroups { x: Var, factors: Vec<f32> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Gelu { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    IndexRows { x: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    RowCosine { a: Var, b: Var },
    L2NormRows { x: Var, eps: f32, norms: Vec<f32> },
    CrossEntropy { q: Var, target: Arc<Vec<f32>>, eps: f32 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddBias { .. } => "add_bias",
            Op::ScaleGroups { .. } => "scale_groups",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax { .. } => "softmax",
            Op::Gelu { .. } => "gelu",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexRows { .. } => "index_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RowCosine { .. } => "row_cosine",
            Op::L2NormRows { .. } => "l2_normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// A recorded operation as seen from outside: op name and output shape.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bindings: HashMap<(u64, usize), Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep: gradients of the loss w.r.t. tape leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn first_axis(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape.iter().product::<usize>() / rows)
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bindings: HashMap::new(),
        }
    }

    /// A tape on which nothing requires grad; used for teacher forwards.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Shapes of every recorded node, in recording order.
    pub fn op_log(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .map(|n| OpRecord {
                op: n.op.name(),
                shape: n.shape.clone(),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            requires_grad: t.requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Binds a stored parameter as a leaf. Repeated binds of the same
    /// parameter return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bindings.insert(key, v);
        v
    }

    /// Whether any parameter of `store` was bound on this tape.
    pub fn binds_store(&self, store: &ParamStore) -> bool {
        self.bindings.keys().any(|(uid, _)| *uid == store.uid())
    }

    /// Copies gradients of every bound parameter of `store` into the store.
    /// Trainable parameters that the loss never reached get a zero gradient.
    pub fn write_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        let uid = store.uid();
        for t in store.tensors_mut() {
            t.grad = if t.requires_grad {
                Some(vec![0.0; t.numel()])
            } else {
                None
            };
        }
        for (&(s, pid), &v) in &self.bindings {
            if s != uid {
                continue;
            }
            if let Some(g) = grads.get(v) {
                let t = store.get_mut(ParamId(pid));
                if t.requires_grad {
                    t.grad = Some(g.to_vec());
                }
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.matmul_impl(a, b, 1, sa[0], sa[1], sb[1], false, false, vec![sa[0], sb[1]])
    }

    /// Batched product of 3-D operands `[batch, rows, cols]`, with optional
    /// transposition of either operand's last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(bad());
        }
        self.matmul_impl(a, b, sa[0], m, k, n, ta, tb, vec![sa[0], m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0f32; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                let (ars, acs) = kernels::strides(m, k, ta);
                let (brs, bcs) = kernels::strides(k, n, tb);
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ars,
                    acs,
                    &bv[i * k * n..(i + 1) * k * n],
                    brs,
                    bcs,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x, bias }))
    }

    /// Multiplies each slice along the first axis by its own constant factor.
    pub fn scale_groups(&mut self, x: Var, factors: Vec<f32>) -> Result<Var> {
        let (groups, width) = first_axis(self.shape(x));
        if factors.len() != groups {
            return Err(Error::Dimension {
                op: "scale_groups",
                lhs: self.shape(x).to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let out = self
            .value(x)
            .chunks_exact(width)
            .zip(&factors)
            .flat_map(|(r, f)| r.iter().map(move |v| v * f))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::ScaleGroups { x, factors }))
    }

    /// Per-row normalization over the last axis followed by `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (rows, d) = rows_of(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        if !(rg && self.grad_enabled) {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = kernels::softmax_strided(self.value(x), outer, len, inner);
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x, outer, len, inner }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let axis = self.shape(x).len() - 1;
        self.softmax(x, axis).expect("last axis")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = Arc::clone(&self.nodes[x.0].value);
        let rg = self.rg(x);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: rg,
            op: Op::Reshape { x },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let (out, out_shape) = kernels::permute(self.value(x), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Gathers slices along the first axis.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, width) = first_axis(&shape);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::contract("index_rows with empty index list"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
            rg |= self.rg(p);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = (v.iter().map(|&v| v as f64).sum::<f64>() / v.len() as f64) as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Mean { x })
    }

    /// Cosine similarity of matching rows (last axis); zero-norm rows give 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("row_cosine", a, b)?;
        let (rows, d) = rows_of(&shape);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..rows)
            .map(|r| {
                let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                let (dot, na, nb) = kernels::dot_norms(x, y);
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    (dot / (na * nb)) as f32
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows], out, rg, Op::RowCosine { a, b }))
    }

    /// Divides each row (last axis) by its L2 norm, floored at `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f32) -> Var {
        let (rows, d) = rows_of(self.shape(x));
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in xv.chunks_exact(d) {
            let n = (r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32).max(eps);
            norms.push(n);
            out.extend(r.iter().map(|v| v / n));
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::L2NormRows { x, eps, norms })
    }

    /// Mean over rows of `-sum_c target[c] * ln(q[c] + eps)`. The target is
    /// a constant; gradients flow only into `q`.
    pub fn cross_entropy(&mut self, q: Var, target: &[f32], eps: f32) -> Result<Var> {
        if target.len() != self.value(q).len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(q).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let (rows, _) = rows_of(self.shape(q));
        let s: f64 = self
            .value(q)
            .iter()
            .zip(target)
            .map(|(&qv, &p)| if p == 0.0 { 0.0 } else { -(p * (qv + eps).ln()) as f64 })
            .sum();
        let rg = self.rg(q);
        Ok(self.push(
            vec![1],
            vec![(s / rows as f64) as f32],
            rg,
            Op::CrossEntropy {
                q,
                target: Arc::new(target.to_vec()),
                eps,
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss is not on this tape"))?;
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (ars, acs) = kernels::strides(m, k, ta);
                let (brs, bcs) = kernels::strides(k, n, tb);
                if self.rg(a) {
                    let ga = grad_slot(grads, a, batch * m * k);
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if !ta {
                            // dA = dC * B_eff^T
                            kernels::gemm(m, n, k, gc, n as isize, 1, bi, bcs, brs, out, 1.0);
                        } else {
                            // dA (k x m) = B_eff * dC^T
                            kernels::gemm(k, n, m, bi, brs, bcs, gc, 1, n as isize, out, 1.0);
                        }
                    }
                }
                if self.rg(b) {
                    let gb = grad_slot(grads, b, batch * k * n);
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if !tb {
                            // dB = A_eff^T * dC
                            kernels::gemm(k, m, n, ai, acs, ars, gc, n as isize, 1, out, 1.0);
                        } else {
                            // dB (n x k) = dC^T * A_eff
                            kernels::gemm(n, m, k, gc, 1, n as isize, ai, ars, acs, out, 1.0);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g);
                }
                if self.rg(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g);
                }
                if self.rg(b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    accumulate_owned(grads, b, neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    accumulate_owned(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    accumulate_owned(grads, b, gb);
                }
            }
            &Op::Affine { x, scale, .. } => {
                accumulate_owned(grads, x, g.iter().map(|v| v * scale).collect());
            }
            &Op::AddBias { x, bias } => {
                if self.rg(x) {
                    accumulate(grads, x, g);
                }
                if self.rg(bias) {
                    let d = self.shape(bias)[0];
                    let mut gb = vec![0.0f32; d];
                    for r in g.chunks_exact(d) {
                        gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    accumulate_owned(grads, bias, gb);
                }
            }
            Op::ScaleGroups { x, factors } => {
                let width = g.len() / factors.len();
                let gx = g
                    .chunks_exact(width)
                    .zip(factors)
                    .flat_map(|(r, f)| r.iter().map(move |v| v * f))
                    .collect();
                accumulate_owned(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                ..
            } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    let mut gg = vec![0.0f32; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate_owned(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gbeta = vec![0.0f32; d];
                    for gr in g.chunks_exact(d) {
                        gbeta.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    accumulate_owned(grads, *beta, gbeta);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; g.len()];
                    for (r, ((gr, hr), out)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..d {
                            let dh = (gr[j] * gv[j]) as f64;
                            s1 += dh;
                            s2 += dh * hr[j] as f64;
                        }
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        let rs = rstd[r] as f64;
                        for j in 0..d {
                            let dh = (gr[j] * gv[j]) as f64;
                            out[j] = (rs * (dh - m1 - hr[j] as f64 * m2)) as f32;
                        }
                    }
                    accumulate_owned(grads, *x, gx);
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let mut gx = vec![0.0f32; g.len()];
                if inner == 1 {
                    for ((gr, yr), out) in g.chunks_exact(len).zip(y.chunks_exact(len)).zip(gx.chunks_exact_mut(len)) {
                        let dot = gr.iter().zip(yr).map(|(a, b)| (a * b) as f64).sum::<f64>() as f32;
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate_owned(grads, x, gx);
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0f64;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += (g[idx] * y[idx]) as f64;
                        }
                        let dot = dot as f32;
                        for l in 0..len {
                            let idx = base + l * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                accumulate_owned(grads, x, gx);
            }
            &Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                accumulate_owned(grads, x, gx);
            }
            &Op::Reshape { x } => accumulate(grads, x, g),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gx, _) = kernels::permute(g, &node.shape, &inv);
                accumulate_owned(grads, *x, gx);
            }
            Op::IndexRows { x, idx } => {
                let (rows, width) = first_axis(self.shape(*x));
                let gx = grad_slot(grads, *x, rows * width);
                for (o, &i) in idx.iter().enumerate() {
                    let src = &g[o * width..(o + 1) * width];
                    gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::Sum { x } => {
                let n = self.value(x).len();
                accumulate_owned(grads, x, vec![g[0]; n]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).len();
                accumulate_owned(grads, x, vec![g[0] / n as f32; n]);
            }
            &Op::RowCosine { a, b } => {
                let (rows, d) = rows_of(self.shape(a));
                let (av, bv) = (self.value(a), self.value(b));
                let mut ga = vec![0.0f32; av.len()];
                let mut gb = vec![0.0f32; bv.len()];
                for r in 0..rows {
                    let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let (dot, na, nb) = kernels::dot_norms(x, y);
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let cos = dot / (na * nb);
                    let gr = g[r] as f64;
                    for j in 0..d {
                        let (xj, yj) = (x[j] as f64, y[j] as f64);
                        ga[r * d + j] = (gr * (yj / (na * nb) - cos * xj / (na * na))) as f32;
                        gb[r * d + j] = (gr * (xj / (na * nb) - cos * yj / (nb * nb))) as f32;
                    }
                }
                if self.rg(a) {
                    accumulate_owned(grads, a, ga);
                }
                if self.rg(b) {
                    accumulate_owned(grads, b, gb);
                }
            }
            Op::L2NormRows { x, norms, .. } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let mut gx = vec![0.0f32; g.len()];
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (a * b) as f64).sum();
                    // Below the floor the op is a plain scaling.
                    let raw = self.value(*x)[r * d..(r + 1) * d]
                        .iter()
                        .map(|&v| (v as f64) * (v as f64))
                        .sum::<f64>()
                        .sqrt() as f32;
                    let project = raw >= *n;
                    for j in 0..d {
                        let v = if project {
                            (gr[j] as f64 - yr[j] as f64 * dot) / *n as f64
                        } else {
                            gr[j] as f64 / *n as f64
                        };
                        gx[r * d + j] = v as f32;
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::CrossEntropy { q, target, eps } => {
                let (rows, _) = rows_of(self.shape(*q));
                let scale = g[0] / rows as f32;
                let gq = self
                    .value(*q)
                    .iter()
                    .zip(target.iter())
                    .map(|(&qv, &p)| -scale * p / (qv + eps))
                    .collect();
                accumulate_owned(grads, *q, gq);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: Vec<usize>, data: Vec<f32>) -> Var {
        t.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 7.0]);
        let i3 = t.constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let bb: Vec<f32> = (0..12).map(|v| v as f32 * 0.5 - 2.0).collect();
        let m = t.constant(vec![3, 4], bb.clone()).unwrap();
        let p = t.matmul(i3, m).unwrap();
        assert_eq!(t.value(p), bb.as_slice());
        let msg = t.matmul(a, m).unwrap_err().to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3, 4]"), "{msg}");
    }

    #[test]
    fn layernorm_examples() {
        let mut t = Tape::new();
        let g = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let b = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let x = t.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        let y = t.layernorm(x, g, b, 1e-6).unwrap();
        let v = t.value(y);
        for (got, want) in v[..3].iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
        let g4 = t.constant(vec![4], vec![1.0; 4]).unwrap();
        assert!(t.layernorm(x, g4, b, 1e-6).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 4], vec![2.5; 4]).unwrap();
        let y = t.softmax_last(x);
        assert!(t.value(y).iter().all(|&p| p == 0.25));
        let big = t.constant(vec![1, 2], vec![0.0, 1e4]).unwrap();
        let s = t.softmax_last(big);
        assert_eq!(t.value(s), &[0.0, 1.0]);
        let cols = t.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let c = t.softmax(cols, 0).unwrap();
        let v = t.value(c);
        for j in 0..3 {
            assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_examples() {
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![0.0, 10.0]).unwrap();
        let y = t.gelu(x);
        assert_eq!(t.value(y)[0], 0.0);
        assert!((t.value(y)[1] - 10.0).abs() < 1e-4);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]);
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![1], vec![3.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        assert_eq!(t.backward(l).unwrap().get(x).unwrap(), &[6.0]);
        let mut t = Tape::new();
        let v = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_nodes_accumulate_path_gradients() {
        // f = sum(x*x) + 3*sum(x): paths through both uses of x add up
        let mut t = Tape::new();
        let x = leaf(&mut t, vec![3], vec![1.0, -2.0, 0.5]);
        let sq = t.mul(x, x).unwrap();
        let three = t.scale(x, 3.0);
        let both = t.add(sq, three).unwrap();
        let l = t.sum(both);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing_trainable() {
        let mut t = Tape::no_grad();
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let l = t.sum(x);
        assert!(!t.requires_grad(l));
        assert!(t.backward(l).unwrap().get(x).is_none());
    }
}
