//! Minimal CNN building blocks on `ndarray`.
//!
//! Layers are stateless with respect to activations: `forward` is pure,
//! `forward_train` additionally returns the cache needed for the backward
//! pass. Networks built from these pieces are therefore shareable read-only
//! across worker threads, and the same code instantiates at `f64` for
//! finite-difference checks.

mod adam;
mod conv;
mod linear;
mod ops;

pub use adam::Adam;
pub use conv::{col2im, im2col, Conv2d};
pub use linear::Linear;
pub use ops::{
    avg_pool2, avg_pool2_backward, concat_channels, global_avg_pool, global_avg_pool_backward,
    silu, silu2, silu2_backward, silu_backward, softmax_rows, split_channels, upsample2,
    upsample2_backward,
};

use ndarray::ScalarOperand;
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type for all network math; implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
