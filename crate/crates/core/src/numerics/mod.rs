//! Dense tensors and a tape-based reverse-mode engine.
//!
//! Everything in this module is generic over [`Scalar`] so the same kernels
//! run in `f32` or `f64`. The detection stack above it pins `f64`
//! (see [`crate::Real`]); gradient-check tolerances assume 64-bit floats.

mod conv;
mod gradcheck;
mod ops;
mod param;
mod sample;
mod tape;
mod tensor;

pub use conv::{conv, upsample_nearest_xy, ConvGeometry};
pub use gradcheck::{compare_gradients, grad_check, numeric_gradient, GradCheck};
pub use ops::*;
pub use param::{ParamId, ParamStore, Parameter};
pub use sample::{
    deformable_sample, normalized_to_index, trilinear_sample, trilinear_sample_points,
    trilinear_weights, Corner, DeformLayout,
};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of every tensor.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
