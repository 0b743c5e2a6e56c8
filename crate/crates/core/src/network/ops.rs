//! Dense kernels: GEMM through `matrixmultiply` and the im2col transforms
//! for 3x3 valid convolutions on channel-last tensors.

use num_traits::Float;

pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
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

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Which operand is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    /// `C[m x n] = A[m x k] B[k x n]`
    NN,
    /// `C[m x n] = A^T B` with `A` stored `k x m`
    TN,
    /// `C[m x n] = A B^T` with `B` stored `n x k`
    NT,
}

/// Row-major GEMM: `C = A op B + beta C`.
pub fn gemm<T: Scalar>(t: Trans, m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match t {
        Trans::TN => (1, m as isize),
        _ => (k as isize, 1),
    };
    let (rsb, csb) = match t {
        Trans::NT => (1, k as isize),
        _ => (n as isize, 1),
    };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major (or transposed row-major) layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// im2col for a 3x3 valid convolution: input `[batch, side, side, ch]`,
/// output `[batch * (side-2)^2, 9 * ch]` with column order `(di, dj, c)`.
pub fn im2col<T: Scalar>(x: &[T], batch: usize, side: usize, ch: usize, col: &mut [T]) {
    let so = side - 2;
    let width = 9 * ch;
    let run = 3 * ch;
    assert_eq!(x.len(), batch * side * side * ch);
    assert_eq!(col.len(), batch * so * so * width);
    for b in 0..batch {
        for oi in 0..so {
            for oj in 0..so {
                let row = ((b * so + oi) * so + oj) * width;
                for di in 0..3 {
                    let src = ((b * side + oi + di) * side + oj) * ch;
                    col[row + di * run..row + (di + 1) * run].copy_from_slice(&x[src..src + run]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(col: &[T], batch: usize, side: usize, ch: usize, x: &mut [T]) {
    let so = side - 2;
    let width = 9 * ch;
    let run = 3 * ch;
    x.fill(T::zero());
    for b in 0..batch {
        for oi in 0..so {
            for oj in 0..so {
                let row = ((b * so + oi) * so + oj) * width;
                for di in 0..3 {
                    let dst = ((b * side + oi + di) * side + oj) * ch;
                    for (o, v) in x[dst..dst + run]
                        .iter_mut()
                        .zip(&col[row + di * run..row + (di + 1) * run])
                    {
                        *o = *o + *v;
                    }
                }
            }
        }
    }
}
