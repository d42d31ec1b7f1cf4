//! Minimal reverse-mode autodiff over `ndarray`, sized for the volumetric
//! models in this crate.
//!
//! A [`Tape`] records a Wengert list of operations; [`Tape::backward`] walks
//! it in reverse and returns gradients for every leaf that requires them.
//! Everything is generic over [`Scalar`] so training runs in f32 while
//! gradient verification against finite differences runs in f64.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use params::ParamSet;
pub use tape::{Grads, Tape, Var};

/// Floating-point element type usable by the tape.
pub trait Scalar:
    ndarray::NdFloat + ndarray::ScalarOperand + rand::distributions::uniform::SampleUniform
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
