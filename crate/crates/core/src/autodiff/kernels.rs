//! Raw numeric kernels shared by the tape's forward and backward rules.

/// Row/column strides of a logical `rows x cols` matrix that is stored
/// row-major either as-is or transposed.
pub(crate) fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c = a * b + beta * c` with `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: isize,
    a_cs: isize,
    b: &[f32],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, a_rs, a_cs, b, b_rs, b_cs, c, beta);
        return;
    }
    // SAFETY: the asserts above bound every element the strides can reach,
    // since each operand is a dense m*k / k*n / m*n block with unit or
    // full-row strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds packing costs more than it saves.
const SMALL_GEMM: usize = 1 << 17;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: isize,
    a_cs: isize,
    b: &[f32],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f32],
    beta: f32,
) {
    let at = |s: &[f32], r: usize, rs: isize, col: usize, cs: isize| s[r * rs as usize + col * cs as usize];
    let packed;
    let b_rows: &[f32] = if b_cs == 1 && b_rs == n as isize {
        &b[..k * n]
    } else {
        packed = (0..k)
            .flat_map(|l| (0..n).map(move |j| (l, j)))
            .map(|(l, j)| at(b, l, b_rs, j, b_cs))
            .collect::<Vec<f32>>();
        &packed
    };
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for l in 0..k {
            let x = at(a, i, a_rs, l, a_cs);
            for (v, &y) in row.iter_mut().zip(&b_rows[l * n..(l + 1) * n]) {
                *v += x * y;
            }
        }
    }
}

pub(crate) fn softmax_strided(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    if inner == 1 {
        for (row, o) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (v, &t) in o.iter_mut().zip(row) {
                *v = (t - max).exp();
                sum += *v as f64;
            }
            let inv = (1.0 / sum) as f32;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut sum = 0.0f64;
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for l in 0..len {
                out[base + l * inner] *= inv;
            }
        }
    }
    out
}

/// sqrt(2 / pi)
const GELU_C: f32 = 0.797_884_6;
const GELU_A: f32 = 0.044_715;

/// `0.5 x (1 + tanh(u))` with `u = sqrt(2/pi) (x + 0.044715 x^3)`, computed
/// as `x * sigmoid(2u)`.
pub fn gelu(x: f32) -> f32 {
    x / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

pub fn gelu_grad(x: f32) -> f32 {
    let e = (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp();
    let s = 1.0 / (1.0 + e);
    // 1 - s without cancellation near s = 1 or overflow of e
    let r = if e > 1.0 { 1.0 / (1.0 + e.recip()) } else { e * s };
    s + 2.0 * x * s * r * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the input for a unit step along each output axis.
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Dot product and both norms, accumulated in f64.
pub(crate) fn dot_norms(x: &[f32], y: &[f32]) -> (f64, f64, f64) {
    let (mut d, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        d += a * b;
        nx += a * a;
        ny += b * b;
    }
    (d, nx.sqrt(), ny.sqrt())
}
