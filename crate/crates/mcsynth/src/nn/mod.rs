//! Minimal CPU neural-network stack: parameter store, layers with explicit
//! forward caches and hand-written backward passes, generic over `f32`
//! (training) and `f64` (gradient checking).

pub mod attention;
pub mod functional;
pub mod layers;
pub mod params;

pub use attention::{AttentionRecord, SelfAttention};
pub use layers::{Conv2d, GroupNorm, Linear};
pub use params::{Grads, ParamId, ParamStore};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// Element type for all tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
