//! Label-noise learning by transition-matrix volume minimization.
//!
//! A classifier `h_θ` and a trainable transition matrix `T̂` are fitted
//! jointly by minimizing forward-corrected cross-entropy plus `λ·ln|det T̂|`.
//! Around that sit the pieces needed to check it: noise models, anchor-point
//! baseline estimators, synthetic data with known posteriors, and numerical
//! tests of the geometric identifiability conditions.

pub mod data;
pub mod estimators;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod optim;
pub mod trainer;
pub mod transition;

pub use data::{Dataset, SimplexProfile};
pub use linalg::{LinalgError, Matrix, SignedLogDet};
pub use model::{Architecture, ClassifierParams, InputMap};
pub use noise::{NoiseSpec, TransitionMatrix};
pub use optim::OptimizerConfig;
pub use trainer::{SelectionMetric, TrainConfig, TrainHistory};
pub use transition::TrainableTransition;
