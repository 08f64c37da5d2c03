//! Benchmark core for feedback-driven explanation training on decoy
//! Fashion-MNIST.
//!
//! The crate synthesizes confounded image datasets with ground-truth
//! feedback masks ([`decoy`]), trains a small convolutional classifier
//! under three loss regimes ([`model`], [`objectives`], [`trainer`]),
//! computes GradCAM saliency with full double-backpropagation support
//! ([`autodiff`], [`saliency`]), and scores both classification accuracy
//! and explanation-localization accuracy against the annotations
//! ([`metrics`]). The [`experiment`] module orchestrates the whole
//! six-configuration grid and renders reports and plots.
//!
//! All floating-point pipelines are generic over the scalar type through
//! the [`Scalar`] trait; production entry points use [`TrainScalar`]
//! (`f32`), while gradient-verification tests instantiate `f64`.

pub mod autodiff;
pub mod decoy;
pub mod experiment;
pub mod idx;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod plot;
pub mod saliency;
pub mod trainer;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point scalar usable throughout the numeric pipeline: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + ndarray::LinalgScalar + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Lossy conversion from `f64`, used for constants and seeded sampling.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to `f64` for logging and aggregation.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Precision used by the training and evaluation entry points.
pub type TrainScalar = f32;

/// Precision used by the finite-difference gradient oracles.
pub type CheckScalar = f64;

/// Computation graph at training precision.
pub type TrainGraph = autodiff::Graph<TrainScalar>;

/// Computation graph at gradient-check precision.
pub type CheckGraph = autodiff::Graph<CheckScalar>;







