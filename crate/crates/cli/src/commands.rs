//! The six pipeline commands and the stage functions they share.
//!
//! Every command reads its inputs from the output directory (where earlier
//! commands left them), so `generate → corrupt → train-volmin` chains without
//! extra flags. `sweep` runs the whole chain per seed in memory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use volmin_core::data::{
    balanced_undersample, gen_gaussian_mixture, gen_simplex_feature, read_csv, remove_anchor_candidates, split,
    write_csv, Dataset,
};
use volmin_core::estimators::{anchor_estimate_max, anchor_estimate_percentile, fit_noisy_posterior, NoisyPosterior};
use volmin_core::geometry::{scatter_report, PosteriorMatrix, ScatterReport, ScatterSettings};
use volmin_core::linalg::Matrix;
use volmin_core::model::ClassifierParams;
use volmin_core::noise::{build_transition, corrupt_labels, estimation_error, NoiseSpec, TransitionMatrix};
use volmin_core::trainer::{train, Batch, Targets, TrainConfig, TrainOutcome, TrainSetup, TransitionModel};
use volmin_core::transition::TrainableTransition;

use crate::config::{DataSource, ExperimentConfig, Method, ModelSpec, NoiseConfig};
use crate::error::CliError;
use crate::output::{Manifest, Stage};

pub const DATASET_FILE: &str = "dataset.csv";
pub const NOISY_FILE: &str = "noisy.csv";
pub const TRUE_T_FILE: &str = "true_t.txt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const AGGREGATE_HEADER: &str = "method,seed,estimation_error,estimation_error_std,test_accuracy,test_accuracy_std";

/// Environment variable capping concurrent sweep trials.
pub const THREADS_ENV: &str = "VOLMIN_THREADS";

// Stream tags for per-stage seeds.
const TAG_DATA: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_BALANCE: u64 = 3;
const TAG_SPLIT_TEST: u64 = 4;
const TAG_SPLIT_VAL: u64 = 5;
const TAG_INIT: u64 = 6;
const TAG_SHUFFLE: u64 = 7;
const TAG_GEOMETRY: u64 = 8;
const TAG_POSTERIOR_INIT: u64 = 9;

/// Independent per-stage seed (splitmix64 finalizer over seed and tag).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Corrupt,
    CheckScattered,
    TrainVolmin,
    EstimateAnchor,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Corrupt => "corrupt",
            Command::CheckScattered => "check-scattered",
            Command::TrainVolmin => "train-volmin",
            Command::EstimateAnchor => "estimate-anchor",
            Command::Sweep => "sweep",
        }
    }
}

/// What a command runs against: the parsed config plus CLI overrides.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Invocation {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        let seeds = seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
        Self { config, out, seeds }
    }

    /// Seed for single-run commands.
    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }
}

pub fn run(cmd: Command, inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let mut stage = Stage::new(&inv.out, cmd.name())?;
    let mut manifest =
        Manifest::new(cmd.name(), if cmd == Command::Sweep { inv.seeds.clone() } else { vec![inv.seed()] });
    match cmd {
        Command::Generate => cmd_generate(inv, &mut stage, &mut manifest)?,
        Command::Corrupt => cmd_corrupt(inv, &mut stage, &mut manifest)?,
        Command::CheckScattered => cmd_check_scattered(inv, &mut stage, &mut manifest)?,
        Command::TrainVolmin => cmd_train_volmin(inv, &mut stage, &mut manifest)?,
        Command::EstimateAnchor => cmd_estimate_anchor(inv, &mut stage, &mut manifest)?,
        Command::Sweep => cmd_sweep(inv, &mut stage, &mut manifest)?,
    }
    manifest.finish(&mut stage, &inv.config.source_text, start.elapsed())?;
    stage.commit()
}

// ---------------------------------------------------------------------------
// Stages

pub fn generate_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset, CliError> {
    let s = derive_seed(seed, TAG_DATA);
    let ds = match &cfg.data.source {
        DataSource::Simplex { classes, n, cap, profile } => gen_simplex_feature(*classes, *n, *cap, *profile, s)?,
        DataSource::Gaussian { mixture, n } => gen_gaussian_mixture(mixture, *n, s)?,
        DataSource::Csv { path, classes } => {
            if !path.exists() {
                return Err(CliError::MissingInput { path: path.clone(), hint: "data.path does not exist" });
            }
            read_csv(path, *classes)?
        }
    };
    Ok(ds)
}

pub fn true_transition(cfg: &ExperimentConfig, classes: usize) -> Result<TransitionMatrix, CliError> {
    let spec = match &cfg.noise {
        NoiseConfig::Symmetric(rate) => NoiseSpec::Symmetric { rate: *rate, classes },
        NoiseConfig::Pair(rate) => NoiseSpec::Pair { rate: *rate, classes },
        NoiseConfig::Custom(path) => {
            if !path.exists() {
                return Err(CliError::MissingInput { path: path.clone(), hint: "noise.matrix does not exist" });
            }
            let m = Matrix::read_text(path).map_err(|e| CliError::Config(format!("noise.matrix: {e}")))?;
            if m.rows() != classes {
                return Err(CliError::Config(format!(
                    "noise.matrix is {}x{}, data has {classes} classes",
                    m.rows(),
                    m.cols()
                )));
            }
            NoiseSpec::Custom(m)
        }
    };
    Ok(build_transition(&spec)?)
}

/// Draws noisy labels, then applies anchor removal and class balancing.
pub fn corrupt_dataset(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seed: u64,
) -> Result<(Dataset, TransitionMatrix), CliError> {
    let t = true_transition(cfg, ds.classes)?;
    let mut noisy = ds.clone();
    noisy.y_noisy = Some(corrupt_labels(&ds.y_clean, &t, derive_seed(seed, TAG_NOISE))?);
    if cfg.data.anchor_removal > 0.0 {
        let estimated = match &noisy.clean_posterior {
            Some(_) => None,
            // No exact posterior: rank by a model fitted on the noisy labels.
            None => {
                let batch = hard_batch(&noisy)?;
                let empty = Batch::new(Matrix::zeros(0, noisy.dim()), Targets::Hard(Vec::new()))?;
                let model =
                    fit_posterior_model(cfg, &cfg.estimators.model, batch, empty, noisy.dim(), noisy.classes, seed)?;
                Some(Matrix::from_fn(noisy.len(), noisy.classes, |i, k| model.posterior(noisy.x.row(i))[k]))
            }
        };
        noisy = remove_anchor_candidates(&noisy, cfg.data.anchor_removal, estimated.as_ref())?;
    }
    if cfg.data.balance {
        noisy = balanced_undersample(&noisy, derive_seed(seed, TAG_BALANCE))?;
    }
    Ok((noisy, t))
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Test split first, then validation out of the remaining training data.
pub fn split_dataset(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Splits, CliError> {
    let (rest, test) = split(ds, cfg.data.test_fraction, derive_seed(seed, TAG_SPLIT_TEST))?;
    let (train, validation) = split(&rest, cfg.data.val_fraction, derive_seed(seed, TAG_SPLIT_VAL))?;
    if train.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    Ok(Splits { train, validation, test })
}

fn hard_batch(ds: &Dataset) -> Result<Batch, CliError> {
    let y =
        ds.y_noisy.clone().ok_or_else(|| CliError::Data("dataset has no noisy labels; run corrupt first".into()))?;
    Ok(Batch::new(ds.x.clone(), Targets::Hard(y))?)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed: derive_seed(seed, TAG_SHUFFLE), ..cfg.train.clone() }
}

fn fit_posterior_model(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    train_batch: Batch,
    val_batch: Batch,
    inputs: usize,
    classes: usize,
    seed: u64,
) -> Result<volmin_core::estimators::NoisyPosteriorModel, CliError> {
    let init = ClassifierParams::init(
        spec.architecture(inputs, classes),
        spec.input_map,
        derive_seed(seed, TAG_POSTERIOR_INIT),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(fit_noisy_posterior(train_batch, val_batch, init, &train_config(cfg, seed))?)
}

/// Accuracy of `argmax h(x)` against the clean labels.
pub fn clean_accuracy(params: &ClassifierParams, ds: &Dataset) -> Option<f64> {
    if ds.is_empty() {
        return None;
    }
    let hits = (0..ds.len())
        .filter(|&i| {
            let h = params.forward(ds.x.row(i));
            let best = (0..h.len()).fold(0, |b, k| if h[k] > h[b] { k } else { b });
            best == ds.y_clean[i]
        })
        .count();
    Some(hits as f64 / ds.len() as f64)
}

/// Mean `‖h(x) − P(Y|x)‖∞` over a split with a known clean posterior.
pub fn posterior_error(params: &ClassifierParams, ds: &Dataset) -> Option<f64> {
    let post = ds.clean_posterior.as_ref()?;
    if ds.is_empty() {
        return None;
    }
    let total: f64 = (0..ds.len())
        .map(|i| {
            let h = params.forward(ds.x.row(i));
            h.iter().zip(post.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .sum();
    Some(total / ds.len() as f64)
}

pub struct VolminRun {
    pub outcome: TrainOutcome,
    pub t_hat: TransitionMatrix,
    pub estimation_error: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub posterior_error: Option<f64>,
}

pub fn run_volmin(
    cfg: &ExperimentConfig,
    splits: &Splits,
    t_true: Option<&Matrix>,
    seed: u64,
) -> Result<VolminRun, CliError> {
    let c = splits.train.classes;
    let init = ClassifierParams::init(
        cfg.model.architecture(splits.train.dim(), c),
        cfg.model.input_map,
        derive_seed(seed, TAG_INIT),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let setup = TrainSetup {
        train: hard_batch(&splits.train)?,
        validation: hard_batch(&splits.validation)?,
        transition: TransitionModel::Learnable(TrainableTransition::constant(c, cfg.transition_init_weight(c))),
        classifier: init,
        true_t: t_true.cloned(),
    };
    let outcome = train(setup, &train_config(cfg, seed))?;
    let t_hat = outcome.best.transition.realize();
    let estimation_error = t_true.map(|t| estimation_error(t, t_hat.matrix())).transpose()?;
    let test_accuracy = clean_accuracy(&outcome.best.classifier, &splits.test);
    let posterior_error = posterior_error(&outcome.best.classifier, &splits.test);
    Ok(VolminRun { outcome, t_hat, estimation_error, test_accuracy, posterior_error })
}

pub struct AnchorEstimate {
    pub method: Method,
    pub t_hat: Matrix,
    pub estimation_error: Option<f64>,
    /// Clean test accuracy of a forward-corrected classifier using `t_hat`.
    pub test_accuracy: Option<f64>,
}

pub struct AnchorRun {
    pub model: volmin_core::estimators::NoisyPosteriorModel,
    pub estimates: Vec<AnchorEstimate>,
}

/// Fits the noisy posterior, reads off each configured estimate and, when
/// `forward_correct` is set, trains a classifier with the estimate frozen.
pub fn run_anchor(
    cfg: &ExperimentConfig,
    splits: &Splits,
    t_true: Option<&Matrix>,
    seed: u64,
    forward_correct: bool,
) -> Result<AnchorRun, CliError> {
    let c = splits.train.classes;
    let d = splits.train.dim();
    let model = fit_posterior_model(
        cfg,
        &cfg.estimators.model,
        hard_batch(&splits.train)?,
        hard_batch(&splits.validation)?,
        d,
        c,
        seed,
    )?;
    let mut estimates = Vec::new();
    for &method in &cfg.estimators.methods {
        let t_hat = match method {
            Method::AnchorMax => anchor_estimate_max(&model, &splits.train.x)?,
            Method::AnchorPercentile => anchor_estimate_percentile(&model, &splits.train.x, cfg.estimators.alpha)?,
        };
        let estimation_error = t_true.map(|t| estimation_error(t, &t_hat)).transpose()?;
        let test_accuracy = if forward_correct && !splits.test.is_empty() {
            let fixed = TransitionMatrix::stochastic(t_hat.clone(), 1e-9).map_err(|e| {
                CliError::Numerical(format!("{} estimate is not a transition matrix: {e}", method.name()))
            })?;
            let init =
                ClassifierParams::init(cfg.model.architecture(d, c), cfg.model.input_map, derive_seed(seed, TAG_INIT))
                    .map_err(|e| CliError::Config(e.to_string()))?;
            let setup = TrainSetup {
                train: hard_batch(&splits.train)?,
                validation: hard_batch(&splits.validation)?,
                transition: TransitionModel::Fixed(fixed),
                classifier: init,
                true_t: None,
            };
            let out = train(setup, &TrainConfig { lambda: 0.0, ..train_config(cfg, seed) })?;
            clean_accuracy(&out.best.classifier, &splits.test)
        } else {
            None
        };
        estimates.push(AnchorEstimate { method, t_hat, estimation_error, test_accuracy });
    }
    Ok(AnchorRun { model, estimates })
}

pub fn scatter_for(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<ScatterReport, CliError> {
    let post = ds
        .clean_posterior
        .as_ref()
        .ok_or_else(|| CliError::Data("dataset has no clean posterior; geometry checks need one".into()))?;
    let h = PosteriorMatrix::from_rows(post).map_err(|e| CliError::Data(e.to_string()))?;
    let settings = ScatterSettings { seed: derive_seed(seed, TAG_GEOMETRY), ..cfg.geometry.clone() };
    Ok(scatter_report(&h, &settings))
}

// ---------------------------------------------------------------------------
// Commands

fn require(path: &Path, hint: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput { path: path.to_path_buf(), hint })
    }
}

fn stage_dataset(stage: &mut Stage, ds: &Dataset, name: &str) -> Result<(), CliError> {
    let path = stage.path(name);
    write_csv(ds, &path)?;
    stage.register(name);
    if ds.clean_posterior.is_some() {
        let p = volmin_core::data::posterior_path(Path::new(name));
        stage.register(&p.to_string_lossy());
    }
    Ok(())
}

fn load_noisy(inv: &Invocation, manifest: &mut Manifest) -> Result<(Dataset, Option<Matrix>), CliError> {
    let path = inv.out.join(NOISY_FILE);
    require(&path, "run `volmin corrupt` first")?;
    manifest.input(&path)?;
    let ds = read_csv(&path, None)?;
    let t_path = inv.out.join(TRUE_T_FILE);
    let t_true = if t_path.exists() {
        manifest.input(&t_path)?;
        let m = Matrix::read_text(&t_path).map_err(|e| CliError::Data(format!("{}: {e}", t_path.display())))?;
        Some(m)
    } else {
        None
    };
    Ok((ds, t_true))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn cmd_generate(inv: &Invocation, stage: &mut Stage, manifest: &mut Manifest) -> Result<(), CliError> {
    let ds = generate_dataset(&inv.config, inv.seed())?;
    if let DataSource::Csv { path, .. } = &inv.config.data.source {
        manifest.input(path)?;
    }
    manifest.note("instances", ds.len());
    manifest.note("provenance", &ds.provenance);
    stage_dataset(stage, &ds, DATASET_FILE)
}

fn cmd_corrupt(inv: &Invocation, stage: &mut Stage, manifest: &mut Manifest) -> Result<(), CliError> {
    let path = inv.out.join(DATASET_FILE);
    require(&path, "run `volmin generate` first")?;
    manifest.input(&path)?;
    let ds = read_csv(&path, None)?;
    let (noisy, t) = corrupt_dataset(&inv.config, &ds, inv.seed())?;
    manifest.note("instances", noisy.len());
    manifest.note("anchor_removal", inv.config.data.anchor_removal);
    stage_dataset(stage, &noisy, NOISY_FILE)?;
    stage.write(TRUE_T_FILE, &t.matrix().to_text())
}

fn cmd_check_scattered(inv: &Invocation, stage: &mut Stage, manifest: &mut Manifest) -> Result<(), CliError> {
    // Prefer the corrupted set: anchor removal changes the geometry.
    let noisy = inv.out.join(NOISY_FILE);
    let path = if noisy.exists() { noisy } else { inv.out.join(DATASET_FILE) };
    require(&path, "run `volmin generate` first")?;
    manifest.input(&path)?;
    let ds = read_csv(&path, None)?;
    let report = scatter_for(&inv.config, &ds, inv.seed())?;
    stage.write("scatter_report.txt", &report.to_text())?;
    if let Some(q) = &report.witness {
        stage.write("witness_q.txt", &q.to_text())?;
    }
    Ok(())
}

fn cmd_train_volmin(inv: &Invocation, stage: &mut Stage, manifest: &mut Manifest) -> Result<(), CliError> {
    let (ds, t_true) = load_noisy(inv, manifest)?;
    let splits = split_dataset(&inv.config, &ds, inv.seed())?;
    let run = run_volmin(&inv.config, &splits, t_true.as_ref(), inv.seed())?;
    write_volmin(stage, &run)
}

fn write_volmin(stage: &mut Stage, run: &VolminRun) -> Result<(), CliError> {
    if let TransitionModel::Learnable(tt) = &run.outcome.best.transition {
        stage.write("volmin_weights.txt", &tt.to_text())?;
    }
    stage.write("volmin_classifier.txt", &run.outcome.best.classifier.to_text())?;
    stage.write("volmin_history.csv", &run.outcome.history.to_csv())?;
    stage.write("volmin_t_estimated.txt", &run.t_hat.matrix().to_text())?;
    let mut report = String::new();
    writeln!(report, "best_epoch={}", run.outcome.best.epoch).unwrap();
    writeln!(report, "estimation_error={}", fmt_opt(run.estimation_error)).unwrap();
    writeln!(report, "test_accuracy={}", fmt_opt(run.test_accuracy)).unwrap();
    writeln!(report, "test_posterior_error={}", fmt_opt(run.posterior_error)).unwrap();
    let events: usize = run.outcome.history.records.iter().map(|r| r.det_sign_events).sum();
    writeln!(report, "det_sign_events={events}").unwrap();
    stage.write("volmin_report.txt", &report)
}

fn cmd_estimate_anchor(inv: &Invocation, stage: &mut Stage, manifest: &mut Manifest) -> Result<(), CliError> {
    let (ds, t_true) = load_noisy(inv, manifest)?;
    let splits = split_dataset(&inv.config, &ds, inv.seed())?;
    let run = run_anchor(&inv.config, &splits, t_true.as_ref(), inv.seed(), false)?;
    manifest.note("alpha", inv.config.estimators.alpha);
    write_anchor(stage, &run)
}

fn write_anchor(stage: &mut Stage, run: &AnchorRun) -> Result<(), CliError> {
    stage.write("noisy_posterior_model.txt", &run.model.params.to_text())?;
    let mut report = String::new();
    for e in &run.estimates {
        let name = e.method.name();
        stage.write(&format!("t_{}.txt", name.replace('-', "_")), &e.t_hat.to_text())?;
        writeln!(report, "{name}.estimation_error={}", fmt_opt(e.estimation_error)).unwrap();
        if e.test_accuracy.is_some() {
            writeln!(report, "{name}.test_accuracy={}", fmt_opt(e.test_accuracy)).unwrap();
        }
    }
    stage.write("anchor_report.txt", &report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub seed: u64,
    pub estimation_error: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// One seed of the sweep, written under `seed-<n>/`.
fn sweep_seed(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Vec<SweepRow>, CliError> {
    let dir = out.join(format!("seed-{seed}"));
    let mut stage = Stage::new(&dir, "sweep")?;
    let ds = generate_dataset(cfg, seed)?;
    let (noisy, t) = corrupt_dataset(cfg, &ds, seed)?;
    let splits = split_dataset(cfg, &noisy, seed)?;
    let volmin = run_volmin(cfg, &splits, Some(t.matrix()), seed)?;
    let anchor = run_anchor(cfg, &splits, Some(t.matrix()), seed, true)?;
    stage.write(TRUE_T_FILE, &t.matrix().to_text())?;
    write_volmin(&mut stage, &volmin)?;
    write_anchor(&mut stage, &anchor)?;
    stage.commit()?;

    let mut rows = vec![SweepRow {
        method: "volmin".into(),
        seed,
        estimation_error: volmin.estimation_error,
        test_accuracy: volmin.test_accuracy,
    }];
    rows.extend(anchor.estimates.iter().map(|e| SweepRow {
        method: e.method.name().into(),
        seed,
        estimation_error: e.estimation_error,
        test_accuracy: e.test_accuracy,
    }));
    Ok(rows)
}

fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed rows followed by one `mean` row per method (sample std).
pub fn aggregate_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},,{},", r.method, r.seed, fmt_opt(r.estimation_error), fmt_opt(r.test_accuracy))
            .unwrap();
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for m in methods {
        let col = |f: fn(&SweepRow) -> Option<f64>| -> (String, String) {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == m).filter_map(f).collect();
            if v.is_empty() {
                return (String::new(), String::new());
            }
            let (mean, std) = mean_std(&v);
            (format!("{mean:?}"), format!("{std:?}"))
        };
        let (em, es) = col(|r| r.estimation_error);
        let (am, as_) = col(|r| r.test_accuracy);
        writeln!(out, "{m},mean,{em},{es},{am},{as_}").unwrap();
    }
    out
}

fn cmd_sweep(inv: &Invocation, stage: &mut Stage, manifest: &mut Manifest) -> Result<(), CliError> {
    let threads = thread_cap();
    let results = parallel_map(&inv.seeds, threads, |&seed| sweep_seed(&inv.config, &inv.out, seed));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    manifest.note("alpha", inv.config.estimators.alpha);
    let dirs: Vec<String> = inv.seeds.iter().map(|s| format!("seed-{s}")).collect();
    manifest.note("seed_dirs", dirs.join(","));
    stage.write(AGGREGATE_FILE, &aggregate_csv(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_seed() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..20 {
            for tag in 1..10 {
                assert!(seen.insert(derive_seed(seed, tag)));
            }
        }
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn aggregate_layout() {
        let rows = vec![
            SweepRow { method: "volmin".into(), seed: 0, estimation_error: Some(0.1), test_accuracy: Some(0.9) },
            SweepRow { method: "anchor-max".into(), seed: 0, estimation_error: Some(0.3), test_accuracy: None },
            SweepRow { method: "volmin".into(), seed: 1, estimation_error: Some(0.3), test_accuracy: Some(0.7) },
        ];
        let csv = aggregate_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], AGGREGATE_HEADER);
        assert_eq!(lines[1], "volmin,0,0.1,,0.9,");
        assert_eq!(lines[2], "anchor-max,0,0.3,,,");
        assert!(lines[4].starts_with("volmin,mean,0.2,"));
        assert_eq!(lines[5], "anchor-max,mean,0.3,0.0,,");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        for threads in [1, 3, 8] {
            assert_eq!(parallel_map(&items, threads, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }
}
