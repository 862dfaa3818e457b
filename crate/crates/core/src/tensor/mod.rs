//! Complex N-d arrays and the reverse-mode gradient tape used to train the
//! network.
//!
//! Complex values live in two layouts. [`ComplexTensor`] keeps separate real
//! and imaginary arrays and is the value type handed across module
//! boundaries. Inside a [`Graph`] a complex tensor is a single real array
//! whose leading axis has length 2 (plane 0 real, plane 1 imaginary); every
//! complex layer is a real-valued function of both planes and is
//! differentiated as such.

mod complex;
pub mod conv;
pub mod gradcheck;
mod graph;
pub mod kernel;
mod lstm;
mod params;
mod shape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub use complex::ComplexTensor;
pub use conv::ConvGeometry;
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub(crate) use shape::broadcast_shape;

/// Floating point element type of every tensor (`f32` for training and
/// inference, `f64` for gradient checking).
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// See [`kernel::gemm_nt_acc`].
    fn gemm_nt_acc(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        kernel::gemm_nt_generic(m, n, k, a, b, c);
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm_nt_acc(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        kernel::gemm_nt_f32(m, n, k, a, b, c);
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
