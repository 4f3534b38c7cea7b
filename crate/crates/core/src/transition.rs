//! The trainable transition matrix.
//!
//! Off-diagonal weights `w_ij` pass through a sigmoid, the diagonal is pinned
//! at 1, and each column is normalized to sum to one. Every finite weight grid
//! therefore realizes a column-stochastic, diagonally dominant matrix.

use crate::linalg::{signed_logdet, LinalgError, Matrix, SignedLogDet};
use crate::noise::TransitionMatrix;

/// Sigmoid outputs are capped here so the diagonal stays strictly dominant in
/// floating point even for very large weights.
const SIGMOID_CAP: f64 = 1.0 - 1e-12;

pub fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

/// Default off-diagonal weight: `ln(1/(C−2))`, which realizes a 0.5 diagonal.
/// That is undefined for two classes, where −2 is used instead.
pub fn default_init_weight(classes: usize) -> f64 {
    if classes >= 3 {
        (1.0 / (classes as f64 - 2.0)).ln()
    } else {
        -2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableTransition {
    /// C×C weights; the diagonal is ignored.
    weights: Matrix,
}

/// Intermediate values of one realization, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct Realized {
    pub t: TransitionMatrix,
    /// Pre-normalization matrix A (unit diagonal).
    pub a: Matrix,
    /// Column sums of A.
    pub col_sums: Vec<f64>,
}

impl TrainableTransition {
    pub fn new(weights: Matrix) -> Result<Self, LinalgError> {
        if !weights.is_square() {
            return Err(LinalgError::NotSquare {
                op: "TrainableTransition",
                rows: weights.rows(),
                cols: weights.cols(),
            });
        }
        let mut weights = weights;
        for i in 0..weights.rows() {
            weights[(i, i)] = 0.0;
        }
        Ok(Self { weights })
    }

    pub fn constant(classes: usize, w: f64) -> Self {
        Self { weights: Matrix::from_fn(classes, classes, |i, j| if i == j { 0.0 } else { w }) }
    }

    pub fn with_default_init(classes: usize) -> Self {
        Self::constant(classes, default_init_weight(classes))
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Mutable access to the raw weights for optimizers. Diagonal writes are
    /// harmless: the diagonal never enters the realization.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.as_mut_slice()
    }

    pub fn realize(&self) -> TransitionMatrix {
        self.realize_full().t
    }

    pub fn realize_full(&self) -> Realized {
        let c = self.classes();
        let a = Matrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { sigmoid(self.weights[(i, j)]).min(SIGMOID_CAP) });
        let col_sums: Vec<f64> = (0..c).map(|j| (0..c).map(|i| a[(i, j)]).sum()).collect();
        let t = Matrix::from_fn(c, c, |i, j| a[(i, j)] / col_sums[j]);
        Realized { t: TransitionMatrix::from_matrix_unchecked(t), a, col_sums }
    }

    /// Pulls `∂f/∂T̂` back to `∂f/∂W`. The diagonal of the result is zero.
    pub fn backward(&self, grad_t: &Matrix) -> Matrix {
        self.backward_with(&self.realize_full(), grad_t)
    }

    pub fn backward_with(&self, r: &Realized, grad_t: &Matrix) -> Matrix {
        let c = self.classes();
        assert_eq!(grad_t.shape(), (c, c), "grad_T must be {c}x{c}");
        let mut grad_w = Matrix::zeros(c, c);
        for j in 0..c {
            // Σ_k G_kj T̂_kj is shared by every row of column j.
            let shared: f64 = (0..c).map(|k| grad_t[(k, j)] * r.t[(k, j)]).sum();
            for i in (0..c).filter(|&i| i != j) {
                let aij = r.a[(i, j)];
                let sig_grad = if aij >= SIGMOID_CAP { 0.0 } else { aij * (1.0 - aij) };
                grad_w[(i, j)] = (grad_t[(i, j)] - shared) / r.col_sums[j] * sig_grad;
            }
        }
        grad_w
    }

    /// W in the matrix text format (checkpoints store W, never T̂).
    pub fn to_text(&self) -> String {
        format!("# transition weights {}x{}\n{}", self.classes(), self.classes(), self.weights.to_text())
    }

    pub fn parse_text(text: &str) -> Result<Self, LinalgError> {
        Self::new(Matrix::parse_text(text)?)
    }
}

/// Volume proxy `ln|det T̂|` with its sign.
pub fn volume(t: &TransitionMatrix) -> SignedLogDet {
    signed_logdet(t.matrix()).expect("transition matrices are square")
}
