//! End-to-end training of the classifier and the transition matrix.
//!
//! The objective on a batch B is
//!
//! ```text
//! L = 1/|B| Σ −ln([T̂ h_θ(x)]_ỹ) + λ · ln|det T̂|
//! ```
//!
//! and both parameter sets are updated from the same gradient evaluation.
//! With soft targets (a known noisy posterior per instance) the fidelity term
//! becomes the expected cross-entropy `−Σ_k g_k ln [T̂h]_k`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{inverse_transpose, Matrix};
use crate::model::{ClassifierParams, ParamGrads};
use crate::noise::{estimation_error, TransitionMatrix};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::transition::{volume, Realized, TrainableTransition};

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; last good parameters are from epoch {}", last_good.epoch)]
    NonFinite { epoch: usize, step: usize, last_good: Box<Snapshot> },
    #[error("realized transition matrix is singular")]
    Singular,
}

/// The transition either trains or stays fixed (forward correction, or the
/// identity when fitting a plain noisy-posterior model).
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionModel {
    Learnable(TrainableTransition),
    Fixed(TransitionMatrix),
}

impl TransitionModel {
    pub fn classes(&self) -> usize {
        match self {
            TransitionModel::Learnable(tt) => tt.classes(),
            TransitionModel::Fixed(t) => t.classes(),
        }
    }

    pub fn realize(&self) -> TransitionMatrix {
        match self {
            TransitionModel::Learnable(tt) => tt.realize(),
            TransitionModel::Fixed(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Observed noisy labels.
    Hard(Vec<usize>),
    /// n × C noisy posteriors, one row per instance.
    Soft(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(y) => y.len(),
            Targets::Soft(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Hard(y) => Targets::Hard(idx.iter().map(|&i| y[i]).collect()),
            Targets::Soft(m) => Targets::Soft(m.select_rows(idx)),
        }
    }
}

/// Features with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(x: Matrix, targets: Targets) -> Result<Self, TrainError> {
        if x.rows() != targets.len() {
            return Err(TrainError::Setup(format!("{} rows but {} targets", x.rows(), targets.len())));
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        Batch { x: self.x.select_rows(idx), targets: self.targets.subset(idx) }
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// fidelity + λ·ln|det T̂|
    pub loss: f64,
    pub fidelity: f64,
    pub logdet_sign: i8,
    pub logdet: f64,
    /// `None` when the transition is fixed.
    pub grad_w: Option<Matrix>,
    pub grad_theta: ParamGrads,
    /// Probabilities that hit [`PROB_FLOOR`].
    pub clamp_events: usize,
}

/// Objective value and exact gradients on the rows `idx` of `data`.
pub fn loss_and_grads(
    data: &Batch,
    idx: &[usize],
    transition: &TransitionModel,
    params: &ClassifierParams,
    lambda: f64,
) -> Result<LossAndGrads, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::Setup("empty batch".into()));
    }
    let c = transition.classes();
    if params.classes() != c || params.inputs() != data.x.cols() {
        return Err(TrainError::Setup("classifier shape does not match data/transition".into()));
    }
    let realized: Option<Realized> = match transition {
        TransitionModel::Learnable(tt) => Some(tt.realize_full()),
        TransitionModel::Fixed(_) => None,
    };
    let t: &Matrix = match (&realized, transition) {
        (Some(r), _) => r.t.matrix(),
        (None, TransitionModel::Fixed(t)) => t.matrix(),
        _ => unreachable!(),
    };

    let scale = 1.0 / idx.len() as f64;
    let mut grad_t = Matrix::zeros(c, c);
    let mut grad_theta = ParamGrads::zeros_like(params);
    let mut fidelity = 0.0;
    let mut clamp_events = 0;
    let mut q = vec![0.0; c];
    let mut grad_h = vec![0.0; c];

    for &i in idx {
        let cache = params.forward_cached(data.x.row(i));
        let h = &cache.probs;
        for (k, qk) in q.iter_mut().enumerate() {
            *qk = t.row(k).iter().zip(h).map(|(a, b)| a * b).sum();
        }
        grad_h.iter_mut().for_each(|g| *g = 0.0);
        let mut add_term = |k: usize, weight: f64, fid: &mut f64, grad_t: &mut Matrix, grad_h: &mut [f64]| {
            let mut qk = q[k];
            if qk < PROB_FLOOR {
                qk = PROB_FLOOR;
                clamp_events += 1;
            }
            *fid -= weight * qk.ln();
            let coef = -weight / qk;
            for (gh, tk) in grad_h.iter_mut().zip(t.row(k)) {
                *gh += coef * tk;
            }
            for (gt, hj) in grad_t.row_mut(k).iter_mut().zip(h) {
                *gt += scale * coef * hj;
            }
        };
        match &data.targets {
            Targets::Hard(y) => {
                let yi = y[i];
                if yi >= c {
                    return Err(TrainError::Setup(format!("label {yi} is not below {c}")));
                }
                add_term(yi, 1.0, &mut fidelity, &mut grad_t, &mut grad_h);
            }
            Targets::Soft(g) => {
                for k in 0..c {
                    let w = g[(i, k)];
                    if w != 0.0 {
                        add_term(k, w, &mut fidelity, &mut grad_t, &mut grad_h);
                    }
                }
            }
        }
        grad_h.iter_mut().for_each(|g| *g *= scale);
        params.backward_into(&cache, &grad_h, &mut grad_theta);
    }
    fidelity *= scale;

    let vol = volume(&TransitionMatrix::from_matrix_unchecked(t.clone()));
    let (grad_w, loss) = match (transition, &realized) {
        (TransitionModel::Learnable(tt), Some(r)) => {
            if vol.sign == 0 {
                return Err(TrainError::Singular);
            }
            let mut loss = fidelity;
            if lambda != 0.0 {
                loss += lambda * vol.log_abs;
                let inv_t = inverse_transpose(t).map_err(|_| TrainError::Singular)?;
                for (g, v) in grad_t.as_mut_slice().iter_mut().zip(inv_t.as_slice()) {
                    *g += lambda * v;
                }
            }
            (Some(tt.backward_with(r, &grad_t)), loss)
        }
        _ => (None, fidelity),
    };
    Ok(LossAndGrads { loss, fidelity, logdet_sign: vol.sign, logdet: vol.log_abs, grad_w, grad_theta, clamp_events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    /// Accuracy of `argmax(T̂h)` against the noisy validation labels.
    NoisyValAccuracy,
    /// Fidelity term on the noisy validation split.
    NoisyValLoss,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::NoisyValAccuracy => "noisy-val-accuracy",
            SelectionMetric::NoisyValLoss => "noisy-val-loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noisy-val-accuracy" => Some(SelectionMetric::NoisyValAccuracy),
            "noisy-val-loss" => Some(SelectionMetric::NoisyValLoss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Volume coefficient λ.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub classifier_optimizer: OptimizerConfig,
    pub transition_optimizer: OptimizerConfig,
    /// `(epoch, divisor)`: after `epoch` completed epochs, divide both
    /// learning rates by `divisor`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub selection: SelectionMetric,
}

pub const DEFAULT_LAMBDA: f64 = 1e-4;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epochs: 300,
            batch_size: 128,
            seed: 0,
            classifier_optimizer: OptimizerConfig::sgd(1e-2, 0.9, 1e-3),
            transition_optimizer: OptimizerConfig::adam(1e-3),
            lr_schedule: vec![(100, 10.0), (200, 10.0)],
            selection: SelectionMetric::NoisyValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Setup(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Setup("batch_size must be >= 1".into()));
        }
        if self.lr_schedule.iter().any(|(_, d)| d.is_nan() || *d <= 0.0) {
            return Err(TrainError::Setup("learning-rate divisors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fidelity: f64,
    pub logdet_sign: i8,
    pub logabsdet: f64,
    pub est_error: Option<f64>,
    pub val_metric: f64,
    pub det_sign_events: usize,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,fidelity,logdet_sign,logabsdet,est_error,val_metric,det_sign_events";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let est = r.est_error.map(|e| format!("{e:?}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:?},{},{:?},{},{:?},{}",
                r.epoch, r.fidelity, r.logdet_sign, r.logabsdet, est, r.val_metric, r.det_sign_events
            )
            .unwrap();
        }
        out
    }
}

/// Parameters at the end of some epoch (0 = initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub transition: TransitionModel,
    pub classifier: ClassifierParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub best: Snapshot,
    pub last: Snapshot,
    pub history: TrainHistory,
}

/// Everything `train` needs besides the configuration.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: Batch,
    pub validation: Batch,
    pub transition: TransitionModel,
    pub classifier: ClassifierParams,
    /// Ground truth, when known, for the per-epoch estimation error.
    pub true_t: Option<Matrix>,
}

pub fn predict_noisy(transition: &Matrix, params: &ClassifierParams, x: &[f64]) -> Vec<f64> {
    let h = params.forward(x);
    (0..transition.rows()).map(|k| transition.row(k).iter().zip(&h).map(|(a, b)| a * b).sum()).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Validation metric; larger is better for accuracy, smaller for loss.
pub fn evaluate(metric: SelectionMetric, batch: &Batch, t: &Matrix, params: &ClassifierParams) -> f64 {
    let n = batch.len();
    if n == 0 {
        return f64::NAN;
    }
    let mut total = 0.0;
    for i in 0..n {
        let q = predict_noisy(t, params, batch.x.row(i));
        total += match (metric, &batch.targets) {
            (SelectionMetric::NoisyValAccuracy, Targets::Hard(y)) => f64::from(u8::from(argmax(&q) == y[i])),
            (SelectionMetric::NoisyValAccuracy, Targets::Soft(g)) => g[(i, argmax(&q))],
            (SelectionMetric::NoisyValLoss, Targets::Hard(y)) => -q[y[i]].max(PROB_FLOOR).ln(),
            (SelectionMetric::NoisyValLoss, Targets::Soft(g)) => {
                (0..q.len()).map(|k| -g[(i, k)] * q[k].max(PROB_FLOOR).ln()).sum()
            }
        };
    }
    total / n as f64
}

fn improves(metric: SelectionMetric, candidate: f64, best: f64) -> bool {
    if candidate.is_nan() {
        return false;
    }
    if best.is_nan() {
        return true;
    }
    match metric {
        SelectionMetric::NoisyValAccuracy => candidate >= best,
        SelectionMetric::NoisyValLoss => candidate <= best,
    }
}

/// Seeded per-epoch shuffle.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Mini-batch training of both parameter sets.
///
/// Returns the parameters of the epoch that scores best on the validation
/// split (ties go to the later epoch); with an empty validation split the last
/// epoch is returned. Sequential and bit-deterministic for a given input.
pub fn train(setup: TrainSetup, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let TrainSetup { train, validation, mut transition, mut classifier, true_t } = setup;
    if train.is_empty() {
        return Err(TrainError::Setup("training split is empty".into()));
    }
    if classifier.classes() != transition.classes() {
        return Err(TrainError::Setup("classifier and transition disagree on the class count".into()));
    }

    let mut theta_opt = Optimizer::new(config.classifier_optimizer);
    let mut w_opt = Optimizer::new(config.transition_optimizer.without_weight_decay());
    let mut history = TrainHistory::default();
    let mut best = Snapshot { epoch: 0, transition: transition.clone(), classifier: classifier.clone() };
    let mut best_metric = f64::NAN;
    let mut last_good = best.clone();

    for epoch in 1..=config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut fid_sum = 0.0;
        let mut det_sign_events = 0;
        let mut clamp_events = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let lg = loss_and_grads(&train, chunk, &transition, &classifier, config.lambda)?;
            if !lg.loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, last_good: Box::new(last_good) });
            }
            if lg.logdet_sign <= 0 && matches!(transition, TransitionModel::Learnable(_)) {
                det_sign_events += 1;
            }
            clamp_events += lg.clamp_events;
            fid_sum += lg.fidelity * chunk.len() as f64;

            let grad_blocks: Vec<&[f64]> = lg.grad_theta.blocks.iter().map(Vec::as_slice).collect();
            theta_opt.step(classifier.blocks_mut(), &grad_blocks);
            if let (TransitionModel::Learnable(tt), Some(gw)) = (&mut transition, &lg.grad_w) {
                w_opt.step(vec![tt.weights_mut()], &[gw.as_slice()]);
            }
            if !classifier.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, last_good: Box::new(last_good) });
            }
        }

        let t_now = transition.realize();
        let vol = volume(&t_now);
        let val_metric = evaluate(config.selection, &validation, t_now.matrix(), &classifier);
        let est_error = true_t.as_ref().and_then(|t| estimation_error(t, t_now.matrix()).ok());
        history.records.push(EpochRecord {
            epoch,
            fidelity: fid_sum / train.len() as f64,
            logdet_sign: vol.sign,
            logabsdet: vol.log_abs,
            est_error,
            val_metric,
            det_sign_events,
            clamp_events,
        });

        let snap = Snapshot { epoch, transition: transition.clone(), classifier: classifier.clone() };
        if validation.is_empty() || improves(config.selection, val_metric, best_metric) {
            best_metric = val_metric;
            best = snap.clone();
        }
        last_good = snap;

        for &(at, divisor) in &config.lr_schedule {
            if at == epoch {
                theta_opt.divide_lr(divisor);
                w_opt.divide_lr(divisor);
            }
        }
    }
    Ok(TrainOutcome { best, last: last_good, history })
}
