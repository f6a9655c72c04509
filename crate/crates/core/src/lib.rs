//! Fair targeted adversarial training for small MLP classifiers.
//!
//! Targeted PGD adversarial training where targets are drawn from a prior
//! built on class false-positive scores, with per-class perturbation margins,
//! weight averaging and class-wise fairness evaluation.

pub mod diffcore;
pub mod error;
pub mod model;

pub use diffcore::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{Checkpoint, ModelDims, ModelParams, SgdConfig, SgdState};
pub mod attacks;
pub mod data;
pub mod metrics;
pub mod sampler;
pub mod trainer;
pub mod experiment;
