//! Numerical checks of the identifiability assumptions on a set of clean
//! posteriors H (one posterior per column):
//!
//! * condition 1: the second-order cone `R = {v : 1ᵀv ≥ √(C−1)‖v‖₂}` lies in
//!   `cone{H}`, tested ray by ray with NNLS on the boundary of R;
//! * condition 2: no orthogonal non-permutation Q has `QᵀH ≥ 0`, probed by a
//!   randomized falsifier (finding nothing is evidence, never proof);
//! * anchor presence: some column reaches `1 − δ` in every class.
//!
//! Also here: the closed-form minimum-volume enclosing interval for two
//! classes, and simplex volumes.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{matmul, nnls, norm2, signed_logdet, Matrix};
use crate::noise::TransitionMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("posterior column {col} is off the simplex")]
    OffSimplex { col: usize },
    #[error("need at least {0}")]
    TooFew(&'static str),
    #[error("no diagonally dominant interval: values span [{min}, {max}] but need max > 0.5 > min")]
    Infeasible { min: f64, max: f64 },
}

/// C × m matrix whose columns are clean posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(Matrix);

impl PosteriorMatrix {
    pub fn new(h: Matrix) -> Result<Self, GeometryError> {
        if h.rows() < 2 {
            return Err(GeometryError::TooFew("two classes"));
        }
        for col in 0..h.cols() {
            let s: f64 = (0..h.rows()).map(|r| h[(r, col)]).sum();
            if (s - 1.0).abs() > 1e-9 || (0..h.rows()).any(|r| h[(r, col)] < -1e-9) {
                return Err(GeometryError::OffSimplex { col });
            }
        }
        Ok(Self(h))
    }

    /// From an n × C matrix of posterior rows (the dataset layout).
    pub fn from_rows(posterior_rows: &Matrix) -> Result<Self, GeometryError> {
        Self::new(posterior_rows.transpose())
    }

    pub fn classes(&self) -> usize {
        self.0.rows()
    }

    pub fn columns(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Columns `idx` only.
    pub fn select(&self, idx: &[usize]) -> PosteriorMatrix {
        PosteriorMatrix(Matrix::from_fn(self.classes(), idx.len(), |r, c| self.0[(r, idx[c])]))
    }
}

/// Unit vectors on the boundary of R: `v = cosθ·𝟙/√C + sinθ·t` with `t ⊥ 𝟙`
/// a random unit tangent and `sinθ = 1/√C`, so that `1ᵀv = √(C−1)`.
pub fn sample_r_rays(classes: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(classes >= 2, "need at least two classes");
    let c = classes as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = ((c - 1.0) / c).sqrt() / c.sqrt(); // cosθ / √C per entry
    let radial = 1.0 / c.sqrt();
    (0..n)
        .map(|_| loop {
            let mut t: Vec<f64> = (0..classes).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = t.iter().sum::<f64>() / c;
            t.iter_mut().for_each(|v| *v -= mean);
            let len = norm2(&t);
            if len < 1e-12 {
                continue;
            }
            break t.iter().map(|ti| axis + radial * ti / len).collect();
        })
        .collect()
}

/// Fraction of rays inside `cone{H}` (relative NNLS residual below `tol`)
/// and whether all of them are.
pub fn check_condition1(h: &PosteriorMatrix, rays: &[Vec<f64>], tol: f64) -> (f64, bool) {
    assert!(!rays.is_empty(), "need at least one ray");
    let passed = rays
        .iter()
        .filter(|v| {
            let sol = nnls(h.matrix(), v, 1e-14).expect("ray length equals class count");
            sol.residual / norm2(v) < tol
        })
        .count();
    (passed as f64 / rays.len() as f64, passed == rays.len())
}

fn min_entry_of_qt_h(q: &Matrix, h: &Matrix) -> f64 {
    let c = q.rows();
    let mut min = f64::INFINITY;
    for k in 0..c {
        for col in 0..h.cols() {
            let v: f64 = (0..c).map(|r| q[(r, k)] * h[(r, col)]).sum();
            if v < min {
                min = v;
            }
        }
    }
    min
}

/// True when every entry of `q` is within `eps` of a signed permutation.
pub fn is_near_signed_permutation(q: &Matrix, eps: f64) -> bool {
    let n = q.rows();
    let mut used = vec![false; n];
    for r in 0..n {
        let mut hit = None;
        for c in 0..n {
            let a = q[(r, c)].abs();
            if (a - 1.0).abs() <= eps {
                if hit.is_some() {
                    return false;
                }
                hit = Some(c);
            } else if a > eps {
                return false;
            }
        }
        match hit {
            Some(c) if !used[c] => used[c] = true,
            _ => return false,
        }
    }
    true
}

/// Haar-distributed orthogonal matrix: Gram–Schmidt QR of a Gaussian matrix,
/// which yields the factor with positive diagonal R.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &cols {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= d * ui);
            }
        }
        let len = norm2(&v);
        if len > 1e-8 {
            cols.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    Matrix::from_fn(n, n, |r, c| cols[c][r])
}

/// Right-multiplies by a Givens rotation in the (i, j) plane.
fn rotate(q: &Matrix, i: usize, j: usize, angle: f64) -> Matrix {
    let (s, c) = angle.sin_cos();
    let mut out = q.clone();
    for r in 0..q.rows() {
        let (a, b) = (q[(r, i)], q[(r, j)]);
        out[(r, i)] = c * a - s * b;
        out[(r, j)] = s * a + c * b;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalsifierOutcome {
    pub trials: usize,
    pub witness: Option<Matrix>,
    /// `min(QᵀH)` of the witness, or the best value seen.
    pub best_min_entry: f64,
}

/// Local hill-climbing steps per trial.
const REFINE_STEPS: usize = 40;
/// Distance below which Q counts as a signed permutation.
pub const PERMUTATION_EPS: f64 = 1e-6;

/// Randomized search for an orthogonal, non-permutation Q with `QᵀH ≥ −tol`.
///
/// Each trial draws a Haar Q and climbs `min(QᵀH)` with small random Givens
/// rotations. Trial `k` uses its own stream of `seed`, so trials are
/// independent of evaluation order.
pub fn check_condition2(h: &PosteriorMatrix, trials: usize, seed: u64, tol: f64) -> FalsifierOutcome {
    check_condition2_with(h, h, trials, seed, tol)
}

/// Like [`check_condition2`] but searches on `search` (e.g. a subsample of
/// the columns) and only accepts witnesses that also hold on `full`.
pub fn check_condition2_with(
    search: &PosteriorMatrix,
    full: &PosteriorMatrix,
    trials: usize,
    seed: u64,
    tol: f64,
) -> FalsifierOutcome {
    let c = search.classes();
    let h = search.matrix();
    let mut best_seen = f64::NEG_INFINITY;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut q = random_orthogonal(c, &mut rng);
        let mut score = min_entry_of_qt_h(&q, h);
        let mut step = 0.2;
        for _ in 0..REFINE_STEPS {
            let i = rng.random_range(0..c);
            let mut j = rng.random_range(0..c - 1);
            if j >= i {
                j += 1;
            }
            let angle = if rng.random_bool(0.5) { step } else { -step };
            let cand = rotate(&q, i, j, angle);
            let cand_score = min_entry_of_qt_h(&cand, h);
            if cand_score > score {
                q = cand;
                score = cand_score;
            } else {
                step *= 0.7;
            }
        }
        best_seen = best_seen.max(score);
        if score >= -tol && !is_near_signed_permutation(&q, PERMUTATION_EPS) {
            let full_score = min_entry_of_qt_h(&q, full.matrix());
            if full_score >= -tol {
                return FalsifierOutcome { trials: trial + 1, witness: Some(q), best_min_entry: full_score };
            }
        }
    }
    FalsifierOutcome { trials, witness: None, best_min_entry: best_seen }
}

/// Per-class maximum posterior entry and whether every class reaches `1 − delta`.
pub fn anchor_presence(h: &PosteriorMatrix, delta: f64) -> (Vec<f64>, bool) {
    let m = h.matrix();
    let maxima: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let verdict = maxima.iter().all(|v| *v >= 1.0 - delta);
    (maxima, verdict)
}

/// Smallest diagonally dominant 2×2 transition whose interval encloses the
/// observed `P(noisy = 0 | x)` values: `T₁₁ = max`, `T₁₂ = min`.
pub fn minvol_interval_oracle(noisy_p1: &[f64]) -> Result<TransitionMatrix, GeometryError> {
    let max = noisy_p1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = noisy_p1.iter().copied().fold(f64::INFINITY, f64::min);
    if noisy_p1.len() < 2 || max <= min {
        return Err(GeometryError::TooFew("two distinct values"));
    }
    if !(max > 0.5 && min < 0.5) {
        return Err(GeometryError::Infeasible { min, max });
    }
    let m = Matrix::from_rows(&[vec![max, min], vec![1.0 - max, 1.0 - min]]).expect("finite");
    Ok(TransitionMatrix::from_matrix_unchecked(m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexVolume {
    /// `det T`
    pub det_proxy: f64,
    /// (C−1)-dimensional volume of conv{columns of T}.
    pub true_volume: f64,
}

pub fn simplex_volume(t: &Matrix) -> SimplexVolume {
    let c = t.rows();
    let det_proxy = signed_logdet(t).map(|d| d.det()).unwrap_or(0.0);
    // Edge vectors from the first vertex; volume = sqrt(det(EᵀE)) / (C−1)!
    let e = Matrix::from_fn(c, c - 1, |r, k| t[(r, k + 1)] - t[(r, 0)]);
    let gram = matmul(&e.transpose(), &e).expect("shapes agree");
    let gram_det = signed_logdet(&gram).map(|d| d.det()).unwrap_or(0.0).max(0.0);
    let factorial: f64 = (1..c).map(|k| k as f64).product();
    SimplexVolume { det_proxy, true_volume: gram_det.sqrt() / factorial }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterReport {
    pub classes: usize,
    pub columns: usize,
    pub columns_searched: usize,
    pub rays: usize,
    pub condition1_tol: f64,
    pub condition1_pass_fraction: f64,
    pub condition1_verdict: bool,
    pub condition2_trials: usize,
    pub condition2_tol: f64,
    pub condition2_falsified: bool,
    pub condition2_best_min_entry: f64,
    pub witness: Option<Matrix>,
    pub anchor_delta: f64,
    pub per_class_max: Vec<f64>,
    pub anchor_verdict: bool,
}

impl ScatterReport {
    /// Flat `key=value` block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let maxima: Vec<String> = self.per_class_max.iter().map(|v| format!("{v:?}")).collect();
        let c2 = if self.condition2_falsified {
            "witness found".to_string()
        } else {
            format!("no witness found in {} trials", self.condition2_trials)
        };
        let lines = [
            ("classes", self.classes.to_string()),
            ("columns", self.columns.to_string()),
            ("columns_searched", self.columns_searched.to_string()),
            ("rays", self.rays.to_string()),
            ("condition1_tol", format!("{:?}", self.condition1_tol)),
            ("condition1_pass_fraction", format!("{:?}", self.condition1_pass_fraction)),
            ("condition1_verdict", if self.condition1_verdict { "pass" } else { "fail" }.to_string()),
            ("condition2_trials", self.condition2_trials.to_string()),
            ("condition2_tol", format!("{:?}", self.condition2_tol)),
            ("condition2_falsified", self.condition2_falsified.to_string()),
            ("condition2_summary", c2),
            ("condition2_best_min_entry", format!("{:?}", self.condition2_best_min_entry)),
            ("anchor_delta", format!("{:?}", self.anchor_delta)),
            ("anchor_per_class_max", maxima.join(";")),
            ("anchor_verdict", if self.anchor_verdict { "present" } else { "absent" }.to_string()),
        ];
        for (k, v) in lines {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

/// Settings for [`scatter_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSettings {
    pub rays: usize,
    pub condition1_tol: f64,
    pub trials: usize,
    pub condition2_tol: f64,
    pub delta: f64,
    /// Columns used for the falsifier search; witnesses are re-checked on all.
    pub max_search_columns: usize,
    pub seed: u64,
}

impl Default for ScatterSettings {
    fn default() -> Self {
        Self {
            rays: 512,
            condition1_tol: 1e-6,
            trials: 10_000,
            condition2_tol: 1e-9,
            delta: 0.05,
            max_search_columns: 2000,
            seed: 0,
        }
    }
}

pub fn scatter_report(h: &PosteriorMatrix, s: &ScatterSettings) -> ScatterReport {
    let rays = sample_r_rays(h.classes(), s.rays, s.seed);
    let (fraction, verdict1) = check_condition1(h, &rays, s.condition1_tol);
    let search = if h.columns() > s.max_search_columns {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5ca7);
        let mut idx: Vec<usize> = (0..h.columns()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        idx.truncate(s.max_search_columns);
        idx.sort_unstable();
        h.select(&idx)
    } else {
        h.clone()
    };
    let falsifier = check_condition2_with(&search, h, s.trials, s.seed, s.condition2_tol);
    let (per_class_max, anchor_verdict) = anchor_presence(h, s.delta);
    ScatterReport {
        classes: h.classes(),
        columns: h.columns(),
        columns_searched: search.columns(),
        rays: s.rays,
        condition1_tol: s.condition1_tol,
        condition1_pass_fraction: fraction,
        condition1_verdict: verdict1,
        condition2_trials: falsifier.trials,
        condition2_tol: s.condition2_tol,
        condition2_falsified: falsifier.witness.is_some(),
        condition2_best_min_entry: falsifier.best_min_entry,
        witness: falsifier.witness,
        anchor_delta: s.delta,
        per_class_max,
        anchor_verdict,
    }
}
