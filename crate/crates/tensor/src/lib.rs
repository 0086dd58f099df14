//! Dense tensors, a per-forward-pass reverse-mode tape, and a central
//! finite-difference gradient checker.
//!
//! Values are stored row-major. Every kernel is generic over [`Real`] so the
//! same model code runs in `f32` for training and in `f64` for gradient
//! checks.

mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type a tensor can hold.
pub trait Real:
    Float + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this precision.
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← α·A·B + β·C` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    unsafe fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
