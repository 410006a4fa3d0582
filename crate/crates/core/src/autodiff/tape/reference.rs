//! Double-precision re-evaluation of a recorded graph.
//!
//! Every op is recomputed here from its definition with plain `f64` loops
//! and no shared kernels, so finite differences taken through
//! [`Tape::replay_f64`] are an independent check of the `f32` backward pass.

use std::collections::HashMap;

use super::{Node, Op, Tape, Var};

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut stride = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        stride[i] = stride[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut idx = vec![0usize; nd];
    let mut out = Vec::with_capacity(x.len());
    for _ in 0..x.len() {
        out.push(x[(0..nd).map(|i| idx[i] * stride[perm[i]]).sum::<usize>()]);
        for i in (0..nd).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

impl Tape {
    /// Value of `out` recomputed in `f64`. Leaves listed in `leaves` take
    /// the given values; every other leaf keeps its recorded value.
    pub fn replay_f64(&self, out: Var, leaves: &HashMap<Var, Vec<f64>>) -> Vec<f64> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
        for (i, node) in self.nodes[..=out.0].iter().enumerate() {
            let v = eval(node, Var(i), &vals, leaves, self);
            vals.push(v);
        }
        vals.pop().expect("at least one node")
    }
}

fn eval(node: &Node, me: Var, vals: &[Vec<f64>], leaves: &HashMap<Var, Vec<f64>>, tape: &Tape) -> Vec<f64> {
    let v = |x: &Var| &vals[x.0];
    let shape = |x: &Var| tape.nodes[x.0].shape.as_slice();
    match &node.op {
        Op::Leaf => leaves
            .get(&me)
            .cloned()
            .unwrap_or_else(|| node.value.iter().map(|&x| x as f64).collect()),
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
            let (av, bv) = (v(&a), v(&b));
            let mut out = vec![0.0; batch * m * n];
            for s in 0..batch {
                let (ao, bo) = (s * m * k, s * k * n);
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for l in 0..k {
                            let x = if ta { av[ao + l * m + i] } else { av[ao + i * k + l] };
                            let y = if tb { bv[bo + j * k + l] } else { bv[bo + l * n + j] };
                            acc += x * y;
                        }
                        out[s * m * n + i * n + j] = acc;
                    }
                }
            }
            out
        }
        Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
        Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
        Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
        &Op::Affine { x, scale, shift } => v(&x).iter().map(|t| scale as f64 * t + shift as f64).collect(),
        Op::AddBias { x, bias } => {
            let bv = v(bias);
            v(x).iter().enumerate().map(|(i, t)| t + bv[i % bv.len()]).collect()
        }
        Op::ScaleGroups { x, factors } => {
            let width = v(x).len() / factors.len();
            v(x).iter().enumerate().map(|(i, t)| t * factors[i / width] as f64).collect()
        }
        Op::LayerNorm { x, gamma, beta, eps, .. } => {
            let (gv, bv) = (v(gamma), v(beta));
            let d = gv.len();
            let mut out = Vec::with_capacity(v(x).len());
            for row in v(x).chunks_exact(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + *eps as f64).sqrt();
                out.extend(row.iter().enumerate().map(|(j, t)| (t - mean) * rs * gv[j] + bv[j]));
            }
            out
        }
        &Op::Softmax { x, outer, len, inner } => {
            let xv = v(&x);
            let mut out = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| xv[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..len).map(|l| (xv[at(l)] - max).exp()).sum();
                    for l in 0..len {
                        out[at(l)] = (xv[at(l)] - max).exp() / z;
                    }
                }
            }
            out
        }
        Op::Gelu { x } => v(x).iter().map(|&t| gelu(t)).collect(),
        Op::Reshape { x } => v(x).clone(),
        Op::Permute { x, perm } => permute(v(x), shape(x), perm),
        Op::IndexRows { x, idx } => {
            let width = v(x).len() / shape(x)[0];
            idx.iter().flat_map(|&i| v(x)[i * width..(i + 1) * width].iter().copied()).collect()
        }
        Op::ConcatRows { parts } => parts.iter().flat_map(|p| v(p).iter().copied()).collect(),
        Op::Sum { x } => vec![v(x).iter().sum()],
        Op::Mean { x } => vec![v(x).iter().sum::<f64>() / v(x).len() as f64],
        Op::RowCosine { a, b } => {
            let (_, d) = rows_cols(shape(a));
            v(a).chunks_exact(d)
                .zip(v(b).chunks_exact(d))
                .map(|(x, y)| {
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let na = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let nb = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        dot / (na * nb)
                    }
                })
                .collect()
        }
        Op::L2NormRows { x, eps, .. } => {
            let (_, d) = rows_cols(shape(x));
            v(x).chunks_exact(d)
                .flat_map(|r| {
                    let n = r.iter().map(|t| t * t).sum::<f64>().sqrt().max(*eps as f64);
                    r.iter().map(move |t| t / n)
                })
                .collect()
        }
        Op::CrossEntropy { q, target, eps } => {
            let (rows, _) = rows_cols(shape(q));
            let s: f64 = v(q)
                .iter()
                .zip(target.iter())
                .map(|(&qv, &p)| if p == 0.0 { 0.0 } else { -(p as f64) * (qv + *eps as f64).ln() })
                .sum();
            vec![s / rows as f64]
        }
    }
}
