//! Dense kernels shared by the forward and backward passes.
//!
//! All matrices are row-major slices. Matrix products go through
//! `matrixmultiply`, which takes explicit strides; that is how per-head views
//! into the packed `[n, embed_dim]` projections are expressed without copies.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub const LN_EPS: f64 = 1e-5;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A B + beta * C` with arbitrary (non-negative) strides.
    ///
    /// # Safety
    /// Every element addressed through the strides must lie inside the
    /// corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Columns `start..start+cols` of a row-major matrix with `stride` columns.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, start: usize, cols: usize) -> Self {
        View {
            data: &data[start.min(data.len())..],
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        ViewMut { data, rows, cols, rs: cols }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, stride: usize, start: usize, cols: usize) -> Self {
        let start = start.min(data.len());
        ViewMut {
            data: &mut data[start..],
            rows,
            cols,
            rs: stride,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + self.cols - 1 < self.data.len()
    }
}

/// `C = alpha * A B + beta * C`.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output dimensions");
    assert!(a.fits() && b.fits() && c.fits(), "strided view out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for r in 0..c.rows {
            for x in &mut c.data[r * c.rs..r * c.rs + c.cols] {
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: `fits` checked that every strided access is in bounds.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            1,
        );
    }
}

/// `out[n, fout] = x[n, fin] W[fin, fout] + bias`.
pub fn dense_forward<T: Real>(x: &[T], n: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let fout = bias.len();
    let fin = w.len() / fout;
    for row in out.chunks_exact_mut(fout) {
        row.copy_from_slice(bias);
    }
    gemm(
        T::one(),
        View::new(x, n, fin),
        View::new(w, fin, fout),
        T::one(),
        ViewMut::new(out, n, fout),
    );
}

/// Accumulates weight/bias gradients and writes (or adds) the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: &mut [T],
    accumulate_dx: bool,
) {
    let fout = db.len();
    let fin = w.len() / fout;
    gemm(
        T::one(),
        View::new(x, n, fin).t(),
        View::new(dout, n, fout),
        T::one(),
        ViewMut::new(dw, fin, fout),
    );
    for row in dout.chunks_exact(fout) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    gemm(
        T::one(),
        View::new(dout, n, fout),
        View::new(w, fin, fout).t(),
        if accumulate_dx { T::one() } else { T::zero() },
        ViewMut::new(dx, n, fin),
    );
}

pub fn layer_norm_forward<T: Real>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mu = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mu) * rs * gain[i] + bias[i];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    d: usize,
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    dout: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for r in 0..x.len() / d {
        let xr = &x[r * d..(r + 1) * d];
        let dr = &dout[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            dgain[i] += dr[i] * xhat;
            dbias[i] += dr[i];
            dxhat[i] = dr[i] * gain[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat;
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            dxr[i] += rs * (dxhat[i] - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// In-place softmax over the first `valid` entries of `row`; the rest are
/// set to zero.
pub fn softmax_prefix<T: Real>(row: &mut [T], valid: usize) {
    let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v /= sum;
    }
    for v in &mut row[valid..] {
        *v = T::zero();
    }
}

/// Sinusoidal position encoding for `positions` rows.
pub fn positions<T: Real>(rows: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for pos in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + 2 * i] = T::lit(angle.sin());
            out[pos * d + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(1.0, View::new(&a, m, k), View::new(&b, k, n), 0.0, ViewMut::new(&mut c, m, n));
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (B^T A^T)^T == A B
        let mut ct = vec![0.0; n * m];
        gemm(1.0, View::new(&b, k, n).t(), View::new(&a, m, k).t(), 0.0, ViewMut::new(&mut ct, n, m));
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_prefix_masks_tail() {
        let mut row = [1.0f64, 2.0, 3.0, 100.0];
        softmax_prefix(&mut row, 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
    }
}
