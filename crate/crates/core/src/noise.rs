//! Class-conditional label noise: ground-truth transition matrices, label
//! corruption, and the estimation-error metric.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{kind} noise with rate {rate} on {classes} classes is not diagonally dominant (rate must be < {limit})")]
    NotDominant { kind: &'static str, rate: f64, classes: usize, limit: f64 },
    #[error("noise rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("transition matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("column {col} sums to {sum}, expected 1")]
    NotStochastic { col: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("column {col}: diagonal {diag} does not exceed entry at row {row} ({other})")]
    DiagonalNotDominant { col: usize, row: usize, diag: f64, other: f64 },
    #[error("label {label} at position {index} is not below {classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("matrices have different sizes: {0} vs {1}")]
    SizeMismatch(usize, usize),
}

/// Column-stochastic C×C matrix, entry (i, j) = P(noisy = i | clean = j).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Matrix);

impl TransitionMatrix {
    /// Accepts any square column-stochastic matrix with entries in [0, 1].
    pub fn stochastic(m: Matrix, tol: f64) -> Result<Self, NoiseError> {
        if !m.is_square() {
            return Err(NoiseError::NotSquare(m.rows(), m.cols()));
        }
        let c = m.rows();
        if c < 2 {
            return Err(NoiseError::TooFewClasses(c));
        }
        for col in 0..c {
            let mut sum = 0.0;
            for row in 0..c {
                let v = m[(row, col)];
                if !(-tol..=1.0 + tol).contains(&v) {
                    return Err(NoiseError::OutOfRange { row, col, value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(NoiseError::NotStochastic { col, sum });
            }
        }
        Ok(Self(m))
    }

    /// Column-stochastic and diagonally dominant: `T_ii > T_ji` for all `j ≠ i`.
    pub fn dominant(m: Matrix, tol: f64) -> Result<Self, NoiseError> {
        let t = Self::stochastic(m, tol)?;
        t.check_dominance()?;
        Ok(t)
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    pub fn identity(classes: usize) -> Self {
        Self(Matrix::identity(classes))
    }

    pub fn classes(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn check_dominance(&self) -> Result<(), NoiseError> {
        let c = self.classes();
        for col in 0..c {
            let diag = self.0[(col, col)];
            for row in (0..c).filter(|&r| r != col) {
                if self.0[(row, col)] >= diag {
                    return Err(NoiseError::DiagonalNotDominant { col, row, diag, other: self.0[(row, col)] });
                }
            }
        }
        Ok(())
    }

    /// Smallest gap `T_ii − max_{j≠i} T_ji` over columns.
    pub fn dominance_margin(&self) -> f64 {
        let c = self.classes();
        (0..c)
            .map(|i| {
                let other = (0..c).filter(|&j| j != i).map(|j| self.0[(j, i)]).fold(f64::NEG_INFINITY, f64::max);
                self.0[(i, i)] - other
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest `|Σ_i T_ij − 1|` over columns.
    pub fn column_sum_error(&self) -> f64 {
        let c = self.classes();
        (0..c).map(|j| ((0..c).map(|i| self.0[(i, j)]).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

impl Deref for TransitionMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Symmetric { rate: f64, classes: usize },
    Pair { rate: f64, classes: usize },
    Custom(Matrix),
}

/// Tolerance used when validating user-supplied matrices.
pub const CUSTOM_TOLERANCE: f64 = 1e-9;

pub fn build_transition(spec: &NoiseSpec) -> Result<TransitionMatrix, NoiseError> {
    match spec {
        NoiseSpec::Symmetric { rate, classes } => {
            let (rate, c) = (*rate, *classes);
            check_rate(rate, c)?;
            let limit = (c as f64 - 1.0) / c as f64;
            if rate >= limit {
                return Err(NoiseError::NotDominant { kind: "symmetric", rate, classes: c, limit });
            }
            let off = rate / (c as f64 - 1.0);
            let m = Matrix::from_fn(c, c, |i, j| if i == j { 1.0 - rate } else { off });
            Ok(TransitionMatrix(m))
        }
        NoiseSpec::Pair { rate, classes } => {
            let (rate, c) = (*rate, *classes);
            check_rate(rate, c)?;
            if rate >= 0.5 {
                return Err(NoiseError::NotDominant { kind: "pair", rate, classes: c, limit: 0.5 });
            }
            // Clean class j flips to (j + 1) mod C.
            let m = Matrix::from_fn(c, c, |i, j| {
                if i == j {
                    1.0 - rate
                } else if i == (j + 1) % c {
                    rate
                } else {
                    0.0
                }
            });
            Ok(TransitionMatrix(m))
        }
        NoiseSpec::Custom(m) => TransitionMatrix::dominant(m.clone(), CUSTOM_TOLERANCE),
    }
}

fn check_rate(rate: f64, classes: usize) -> Result<(), NoiseError> {
    if classes < 2 {
        return Err(NoiseError::TooFewClasses(classes));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(NoiseError::BadRate(rate));
    }
    Ok(())
}

/// Draws each noisy label from column `t[:, y]` by inverse CDF on a seeded stream.
pub fn corrupt_labels(labels: &[usize], t: &TransitionMatrix, seed: u64) -> Result<Vec<usize>, NoiseError> {
    let c = t.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .enumerate()
        .map(|(index, &y)| {
            if y >= c {
                return Err(NoiseError::LabelOutOfRange { index, label: y, classes: c });
            }
            let u: f64 = rng.random();
            Ok(sample_column(t, y, u))
        })
        .collect()
}

fn sample_column(t: &Matrix, col: usize, u: f64) -> usize {
    let c = t.rows();
    let mut cum = 0.0;
    let mut last_positive = col;
    for i in 0..c {
        let p = t[(i, col)];
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    // Only reachable through rounding in the cumulative sum.
    last_positive
}

/// `Σ|T_ij − T̂_ij| / Σ|T_ij|` over all entries.
pub fn estimation_error(t_true: &Matrix, t_est: &Matrix) -> Result<f64, NoiseError> {
    if t_true.shape() != t_est.shape() {
        return Err(NoiseError::SizeMismatch(t_true.rows(), t_est.rows()));
    }
    let num: f64 = t_true.as_slice().iter().zip(t_est.as_slice()).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = t_true.as_slice().iter().map(|v| v.abs()).sum();
    Ok(num / den)
}
