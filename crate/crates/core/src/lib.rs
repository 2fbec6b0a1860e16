//! Variance-reduced stochastic conjugate gradient optimization.
//!
//! The crate implements a mini-batch gradient estimate of the form
//! `g = x̄ − γ ⊙ (ȳ − μ)`, where `x̄` is the batch gradient at the current
//! iterate, `ȳ` the batch gradient at a checkpoint, `μ` the known mean of the
//! checkpoint gradients, and `γ` a per-coordinate control-variate coefficient.
//! Choosing `γ` as the ratio of the sample covariance of (x, y) to the sample
//! variance of y minimizes the estimate's variance while keeping it unbiased;
//! `γ = 1` recovers the classic SVRG/SAGA estimate.
//!
//! Two stochastic conjugate gradient loops consume the estimate: one keeps a
//! per-sample gradient table as a rolling checkpoint ([`optimize::run_alg1`]),
//! the other anchors each epoch at a fixed point ([`optimize::run_alg2`]).
//! Both use a strong Wolfe line search and the hybrid PRP-FR conjugacy
//! coefficient. A ridge regression objective, a LIBSVM loader, and an
//! experiment harness (variance curves, convergence comparisons, CSV/SVG
//! output) round out the library.
//!
//! All numerics are generic over the scalar type through [`Scalar`];
//! concrete `f64`/`f32` aliases live at the crate root.

use std::fmt;
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, NumAssign};

pub mod data;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod optimize;
pub mod search;

pub use error::{Error, Result};

/// Floating-point scalar the whole crate is generic over.
///
/// Blanket-implemented for anything float-like, in practice `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + ScalarOperand + Sum<Self> + fmt::Display + fmt::Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants and parsed input.
    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("f64 conversion")
    }

    /// Lossy conversion to `f64`, for trace records and reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + ScalarOperand
        + Sum<T>
        + fmt::Display
        + fmt::Debug
        + Send
        + Sync
        + 'static
{
}

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Ridge64 = model::RidgeObjective<f64>;
pub type Ridge32 = model::RidgeObjective<f32>;
pub type WolfeParams64 = search::WolfeParams<f64>;
pub type RunConfig64 = optimize::RunConfig<f64>;
