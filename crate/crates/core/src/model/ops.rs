//! Row-major dense kernels with hand-written backward passes.

use super::scalar::Scalar;

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Bounds-checked strided GEMM: `c = alpha * op(a)·op(b) + beta * c` where the
/// operand layouts are given by (row stride, col stride) pairs.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize, k: usize, n: usize, alpha: T,
    a: &[T], (rsa, csa): (usize, usize),
    b: &[T], (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T], (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(last_index(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
        assert!(last_index(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    }
    assert!(last_index(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above cover every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m, k, n, alpha,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        )
    }
}

/// `y = x·w + b` for `x: rows×n_in`, `w: n_in×n_out`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, n_in: usize, n_out: usize, y: &mut [T]) {
    for r in 0..rows {
        y[r * n_out..(r + 1) * n_out].copy_from_slice(b);
    }
    gemm(rows, n_in, n_out, T::one(), x, (n_in, 1), w, (n_out, 1), T::one(), y, (n_out, 1));
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and, if requested, writes `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T], w: &[T], dy: &[T],
    rows: usize, n_in: usize, n_out: usize,
    dw: &mut [T], db: &mut [T], dx: Option<&mut [T]>,
) {
    gemm(n_in, rows, n_out, T::one(), x, (1, n_in), dy, (n_out, 1), T::one(), dw, (n_out, 1));
    for r in 0..rows {
        for (acc, g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
            *acc = *acc + *g;
        }
    }
    if let Some(dx) = dx {
        gemm(rows, n_out, n_in, T::one(), dy, (n_out, 1), w, (1, n_out), T::zero(), dx, (n_in, 1));
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `n`; stores normalized inputs and 1/std for backward.
pub fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], n: usize, y: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let nf = T::lit(n as f64);
    let eps = T::lit(LN_EPS);
    for (r, row) in x.chunks_exact(n).enumerate() {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = h * g[j] + b[j];
        }
    }
}

/// Adds the input gradient into `dx` and accumulates `dg`, `db`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T], xhat: &[T], rstd: &[T], g: &[T], n: usize,
    dx: &mut [T], dg: &mut [T], db: &mut [T],
) {
    let nf = T::lit(n as f64);
    for (r, dyr) in dy.chunks_exact(n).enumerate() {
        let xh = &xhat[r * n..(r + 1) * n];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..n {
            let d = dyr[j] * g[j];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xh[j];
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
        }
        mean_d = mean_d / nf;
        mean_dx = mean_dx / nf;
        for j in 0..n {
            let d = dyr[j] * g[j];
            dx[r * n + j] = dx[r * n + j] + rstd[r] * (d - mean_d - xh[j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) without overflow.
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// In-place softmax; returns the log-sum-exp of the original values.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
    max + sum.ln()
}
