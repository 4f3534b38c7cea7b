//! Anchor-point estimators of the transition matrix.
//!
//! Both estimators read columns off a noisy-posterior model at selected
//! instances: the argmax instance per class, or the instance at a given
//! percentile. They work with a trained model or with any exact posterior
//! callback, which separates estimator bias from fitting error.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::ClassifierParams;
use crate::noise::TransitionMatrix;
use crate::trainer::{train, Batch, TrainConfig, TrainError, TrainSetup, TransitionModel};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no instances to estimate from")]
    Empty,
    #[error("percentile {0} outside (0, 100)")]
    BadPercentile(f64),
    #[error("posterior has {got} classes, expected {expected}")]
    ClassMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Anything that maps an instance to `P(noisy label | x)`.
pub trait NoisyPosterior {
    fn classes(&self) -> usize;
    fn posterior(&self, x: &[f64]) -> Vec<f64>;
}

/// Classifier trained with plain cross-entropy on noisy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPosteriorModel {
    pub params: ClassifierParams,
}

impl NoisyPosterior for NoisyPosteriorModel {
    fn classes(&self) -> usize {
        self.params.classes()
    }

    fn posterior(&self, x: &[f64]) -> Vec<f64> {
        self.params.forward(x)
    }
}

/// Wraps a closure as a posterior oracle.
pub struct PosteriorFn<F> {
    pub classes: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> NoisyPosterior for PosteriorFn<F> {
    fn classes(&self) -> usize {
        self.classes
    }

    fn posterior(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// Fits `P(noisy | x)` with the transition pinned to the identity.
pub fn fit_noisy_posterior(
    train_set: Batch,
    validation: Batch,
    init: ClassifierParams,
    config: &TrainConfig,
) -> Result<NoisyPosteriorModel, EstimatorError> {
    let classes = init.classes();
    let setup = TrainSetup {
        train: train_set,
        validation,
        transition: TransitionModel::Fixed(TransitionMatrix::identity(classes)),
        classifier: init,
        true_t: None,
    };
    let config = TrainConfig { lambda: 0.0, ..config.clone() };
    let out = train(setup, &config)?;
    Ok(NoisyPosteriorModel { params: out.best.classifier })
}

fn posteriors(g: &dyn NoisyPosterior, xs: &Matrix) -> Result<Vec<Vec<f64>>, EstimatorError> {
    if xs.rows() == 0 {
        return Err(EstimatorError::Empty);
    }
    let c = g.classes();
    (0..xs.rows())
        .map(|i| {
            let p = g.posterior(xs.row(i));
            if p.len() != c {
                return Err(EstimatorError::ClassMismatch { got: p.len(), expected: c });
            }
            Ok(p)
        })
        .collect()
}

fn columns_to_matrix(cols: Vec<Vec<f64>>) -> Matrix {
    let c = cols.len();
    Matrix::from_fn(c, c, |i, j| cols[j][i])
}

/// Column j is the posterior at `argmax_x ĝ_j(x)` (ties to the lowest index).
/// The result is reported as-is; it need not be diagonally dominant.
pub fn anchor_estimate_max(g: &dyn NoisyPosterior, xs: &Matrix) -> Result<Matrix, EstimatorError> {
    let post = posteriors(g, xs)?;
    let c = g.classes();
    let cols = (0..c)
        .map(|j| {
            let mut best = 0;
            for (i, p) in post.iter().enumerate() {
                if p[j] > post[best][j] {
                    best = i;
                }
            }
            post[best].clone()
        })
        .collect();
    Ok(columns_to_matrix(cols))
}

/// Column j is the posterior at rank `floor(alpha/100 · n)` when instances are
/// sorted by `ĝ_j` descending (stable, so ties keep index order).
pub fn anchor_estimate_percentile(g: &dyn NoisyPosterior, xs: &Matrix, alpha: f64) -> Result<Matrix, EstimatorError> {
    if !(alpha > 0.0 && alpha < 100.0) {
        return Err(EstimatorError::BadPercentile(alpha));
    }
    let post = posteriors(g, xs)?;
    let n = post.len();
    let c = g.classes();
    let rank = ((alpha / 100.0 * n as f64).floor() as usize).min(n - 1);
    let cols = (0..c)
        .map(|j| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| post[b][j].total_cmp(&post[a][j]));
            post[order[rank]].clone()
        })
        .collect();
    Ok(columns_to_matrix(cols))
}
