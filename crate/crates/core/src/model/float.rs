//! Scalar abstraction so the same model code runs in f32 (training) and f64
//! (gradient checking), plus strided GEMM over flat buffers.

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

pub trait Scalar: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    const TAG: &'static str;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `C = A·B + beta·C` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must lie
    /// inside the corresponding buffer; [`gemm`] checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major `rows × cols` block starting at `offset` with row stride `ld`.
    pub fn rm(offset: usize, ld: usize) -> Self {
        View { offset, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major block with row stride `ld`.
    pub fn tr(offset: usize, ld: usize) -> Self {
        View { offset, rs: 1, cs: ld }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// `C[m×n] = A[m×k]·B[k×n] + beta·C`, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    va: View,
    b: &[F],
    vb: View,
    beta: F,
    c: &mut [F],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(va.last(m, k) < a.len() || k == 0, "gemm: A view out of bounds");
    assert!(vb.last(k, n) < b.len() || k == 0, "gemm: B view out of bounds");
    assert!(vc.last(m, n) < c.len(), "gemm: C view out of bounds");
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let x = &mut c[vc.offset + r * vc.rs + col * vc.cs];
                *x = if beta == F::zero() { F::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: the assertions above bound every reachable index
    unsafe {
        F::raw_gemm(
            m,
            k,
            n,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// `Y[m×n] = X[m×k]·W[k×n] + bias`, all row-major and dense.
pub fn linear<F: Scalar>(x: &[F], w: &[F], bias: Option<&[F]>, m: usize, k: usize, n: usize) -> Vec<F> {
    let mut y = vec![F::zero(); m * n];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { F::one() } else { F::zero() };
    gemm(m, k, n, x, View::rm(0, k), w, View::rm(0, n), beta, &mut y, View::rm(0, n));
    y
}

/// Backward of [`linear`]: accumulates `dW += Xᵀ dY`, `db += Σ dY`, returns `dX = dY Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<F> {
    gemm(k, m, n, x, View::tr(0, k), dy, View::rm(0, n), F::one(), dw, View::rm(0, n));
    if let Some(db) = db {
        for row in dy.chunks_exact(n) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    let mut dx = vec![F::zero(); m * k];
    gemm(m, n, k, dy, View::rm(0, n), w, View::tr(0, n), F::zero(), &mut dx, View::rm(0, k));
    dx
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::of(30.0) {
        x
    } else {
        x.max(F::zero()) + (-x.abs()).exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let x2 = x * x;
    let t = (c * (x + F::of(0.044715) * x2 * x)).tanh();
    let dinner = c * (F::one() + F::of(3.0 * 0.044715) * x2);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|x| x as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|x| (x as f64).sin()).collect();
        let y = linear(&a, &b, None, m, k, n);
        for r in 0..m {
            for c in 0..n {
                let want: f64 = (0..k).map(|t| a[r * k + t] * b[t * n + c]).sum();
                assert!((y[r * n + c] - want).abs() < 1e-12);
            }
        }
        // transposed view of B reproduces A·Bᵀᵀ
        let bt: Vec<f64> = (0..n * k).map(|x| b[(x % k) * n + x / k]).collect();
        let mut y2 = vec![0.0; m * n];
        gemm(m, k, n, &a, View::rm(0, k), &bt, View::tr(0, k), 0.0, &mut y2, View::rm(0, n));
        for (p, q) in y.iter().zip(&y2) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
        assert!(gelu(0.0f64).abs() < 1e-15);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(-1e6f64), 0.0);
        assert_eq!(softplus(1e6f64), 1e6);
        assert!((softplus(0.5413f64) - 1.0).abs() < 1e-4);
        assert_eq!(sigmoid(-1e6f32), 0.0);
        assert_eq!(sigmoid(1e6f32), 1.0);
    }
}
