//! Raw slice kernels shared by the tape and the untracked helpers.

/// `c = a·b` (or `c += a·b` when `accumulate`), with explicit row/column strides
/// so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach, and
    // `c` is an exclusive borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax in place. `mask[j] == false` excludes column `j`
/// (probability exactly zero). At least one column must be unmasked.
pub(crate) fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

/// Normalizes one row; returns the reciprocal standard deviation used.
pub(crate) fn normalize_row(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * rstd;
    }
    rstd
}
