//! Floating-point scalar abstraction shared by the tensor, network and
//! simulation code. Implemented for `f32` and `f64`.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Working precision of a tape, network or training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Precision {
    F32,
    #[default]
    F64,
}

pub trait Real:
    Float + Debug + Display + Default + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    // Transcendentals always go through `libm`. The `Float` methods switch to
    // the platform libm whenever anything in the build enables `num-traits/std`,
    // which would make training results depend on the dependency graph.
    fn libm_tanh(self) -> Self;
    fn libm_sin(self) -> Self;
    fn libm_cos(self) -> Self;
    fn libm_exp(self) -> Self;

    /// `C <- alpha * op(A) * op(B) + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the given slices.
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
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn libm_tanh(self) -> Self {
        libm::tanh(self)
    }

    #[inline]
    fn libm_sin(self) -> Self {
        libm::sin(self)
    }

    #[inline]
    fn libm_cos(self) -> Self {
        libm::cos(self)
    }

    #[inline]
    fn libm_exp(self) -> Self {
        libm::exp(self)
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn libm_tanh(self) -> Self {
        libm::tanhf(self)
    }

    #[inline]
    fn libm_sin(self) -> Self {
        libm::sinf(self)
    }

    #[inline]
    fn libm_cos(self) -> Self {
        libm::cosf(self)
    }

    #[inline]
    fn libm_exp(self) -> Self {
        libm::expf(self)
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
