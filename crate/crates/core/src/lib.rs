//! Simulation of temporally intervened causal processes and the
//! detect / adapt / compose pipeline for causal representations.
//!
//! All numeric code is generic over [`Scalar`]; the `*64` and `*32` aliases
//! below pin the common instantiations.

pub mod autodiff;
pub mod classifier;
pub mod composition;
pub mod env;
pub mod flow;
mod error;
pub mod matrix;
pub mod metrics;
pub mod process;
pub mod representation;
pub mod transform;
mod scalar;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type DenseNet64 = autodiff::DenseNet<f64>;
pub type DenseNet32 = autodiff::DenseNet<f32>;
pub type ParamVector64 = autodiff::ParamVector<f64>;
pub type Trajectory64 = process::Trajectory<f64>;
pub type CausalProcess64 = process::CausalProcess<f64>;
pub type LatentSequence64 = representation::LatentSequence<f64>;
pub type Encoder64 = representation::Encoder<f64>;
pub type TargetClassifier64 = classifier::TargetClassifier<f64>;
pub type Flow64 = flow::Flow<f64>;
pub type AdaptationResult64 = flow::AdaptationResult<f64>;
pub type EnvironmentSpec64 = env::EnvironmentSpec<f64>;
pub type CompositionSpec64 = env::CompositionSpec<f64>;
