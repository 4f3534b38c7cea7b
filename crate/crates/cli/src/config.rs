//! Experiment configuration.
//!
//! The file is line-oriented: `section.key = value`, `#` starts a comment,
//! blank lines are ignored. Every key must appear in [`SCHEMA`]; unknown or
//! repeated keys are errors. Relative paths resolve against the directory
//! holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use volmin_core::data::{GaussianMixture, SimplexProfile};
use volmin_core::geometry::ScatterSettings;
use volmin_core::linalg::Matrix;
use volmin_core::model::{Architecture, InputMap};
use volmin_core::optim::OptimizerConfig;
use volmin_core::trainer::{SelectionMetric, TrainConfig, DEFAULT_LAMBDA};
use volmin_core::transition::default_init_weight;

use crate::error::CliError;

/// Fraction of the training split held out for validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
/// Number of seeds a sweep runs when `trials.seeds` is not given.
pub const DEFAULT_REPETITIONS: usize = 5;
pub const DEFAULT_ALPHA: f64 = 3.0;

/// Named anchor-removal fractions.
pub const ANCHOR_REMOVAL_PRESETS: [(&str, f64); 2] = [("na40", 0.4), ("na10", 0.1)];

/// Every accepted key with a one-line description.
pub const SCHEMA: &[(&str, &str)] = &[
    ("data.source", "simplex | gaussian | csv"),
    ("data.classes", "number of classes (simplex; optional for csv)"),
    ("data.n", "number of instances to generate"),
    ("data.cap", "simplex: largest allowed posterior entry, in (1/C, 1]"),
    ("data.profile", "simplex: corner-rich | edge-scattered | center-heavy"),
    ("data.means", "gaussian: class means, rows separated by ';'"),
    ("data.covariance", "gaussian: shared covariance, rows separated by ';' (default identity)"),
    ("data.priors", "gaussian: class priors (default uniform)"),
    ("data.path", "csv: dataset file"),
    ("data.anchor_removal", "none | na40 | na10 | fraction in [0, 1)"),
    ("data.balance", "true | false: undersample noisy classes to equal size"),
    ("data.val_fraction", "validation share of the training split (default 0.1)"),
    ("data.test_fraction", "held-out test share (default 0.2)"),
    ("noise.kind", "symmetric | pair | custom"),
    ("noise.rate", "flip rate for symmetric and pair noise"),
    ("noise.matrix", "custom: transition matrix file"),
    ("train.lambda", "volume coefficient (default 1e-4)"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "mini-batch size"),
    ("train.architecture", "softmax-linear | mlp"),
    ("train.hidden", "mlp hidden widths, e.g. 32 or 32,16"),
    ("train.input_map", "identity | log"),
    ("train.transition_init", "default (ln(1/(C-2)), or -2 for C = 2) or a number"),
    ("train.classifier_optimizer", "sgd | adam"),
    ("train.classifier_lr", "classifier learning rate"),
    ("train.classifier_momentum", "sgd momentum"),
    ("train.classifier_weight_decay", "sgd weight decay"),
    ("train.transition_optimizer", "adam | sgd"),
    ("train.transition_lr", "transition learning rate"),
    ("train.transition_momentum", "sgd momentum for the transition"),
    ("train.lr_schedule", "epoch:divisor pairs, e.g. 100:10,200:10, or none"),
    ("train.selection", "noisy-val-loss | noisy-val-accuracy"),
    ("estimators.methods", "comma list of anchor-max, anchor-percentile"),
    ("estimators.alpha", "percentile for anchor-percentile (default 3)"),
    ("estimators.architecture", "noisy-posterior model (default: train.architecture)"),
    ("estimators.hidden", "noisy-posterior hidden widths (default: train.hidden)"),
    ("estimators.input_map", "noisy-posterior input map (default identity)"),
    ("geometry.rays", "boundary rays for condition 1"),
    ("geometry.condition1_tol", "NNLS residual tolerance"),
    ("geometry.trials", "falsifier trials for condition 2"),
    ("geometry.condition2_tol", "tolerance on min(QᵀH)"),
    ("geometry.delta", "anchor threshold: max entry >= 1 - delta"),
    ("geometry.max_search_columns", "column subsample for the falsifier search"),
    ("trials.seeds", "comma list of seeds (default 0,1,2,3,4)"),
    ("output.dir", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Simplex { classes: usize, n: usize, cap: f64, profile: SimplexProfile },
    Gaussian { mixture: GaussianMixture, n: usize },
    Csv { path: PathBuf, classes: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub anchor_removal: f64,
    pub balance: bool,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseConfig {
    Symmetric(f64),
    Pair(f64),
    Custom(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    AnchorMax,
    AnchorPercentile,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AnchorMax => "anchor-max",
            Method::AnchorPercentile => "anchor-percentile",
        }
    }
}

/// Architecture recipe; input and class counts are filled in from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// None for softmax-linear.
    pub hidden: Option<Vec<usize>>,
    pub input_map: InputMap,
}

impl ModelSpec {
    pub fn architecture(&self, inputs: usize, classes: usize) -> Architecture {
        match &self.hidden {
            None => Architecture::SoftmaxLinear { inputs, classes },
            Some(h) => Architecture::Mlp { inputs, hidden: h.clone(), classes },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub model: ModelSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub model: ModelSpec,
    /// None means the default init for the class count.
    pub transition_init: Option<f64>,
    pub estimators: EstimatorConfig,
    pub geometry: ScatterSettings,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// The file exactly as read, copied into every output directory.
    pub source_text: String,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let kv = Entries::read(text)?;
        let cfg = Self::from_entries(&kv, base_dir, text)?;
        Ok(cfg)
    }

    pub fn transition_init_weight(&self, classes: usize) -> f64 {
        self.transition_init.unwrap_or_else(|| default_init_weight(classes))
    }

    fn from_entries(kv: &Entries, base: &Path, text: &str) -> Result<Self, CliError> {
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let source = match kv.str("data.source").unwrap_or("simplex") {
            "simplex" => {
                let classes = kv.parse("data.classes")?.unwrap_or(3);
                let profile = match kv.str("data.profile") {
                    None => SimplexProfile::EdgeScattered,
                    Some(s) => SimplexProfile::parse(s).ok_or_else(|| bad("data.profile", s))?,
                };
                DataSource::Simplex {
                    classes,
                    n: kv.parse("data.n")?.unwrap_or(20_000),
                    cap: kv.parse("data.cap")?.unwrap_or(0.9),
                    profile,
                }
            }
            "gaussian" => {
                let means = kv.matrix("data.means")?.ok_or_else(|| missing("data.means", "gaussian data"))?;
                let (c, d) = means.shape();
                let covariance = kv.matrix("data.covariance")?.unwrap_or_else(|| Matrix::identity(d));
                let priors = match kv.str("data.priors") {
                    Some(s) => parse_list::<f64>("data.priors", s)?,
                    None => vec![1.0 / c as f64; c],
                };
                let mixture = GaussianMixture::new(means, covariance, priors)
                    .map_err(|e| CliError::Config(format!("gaussian mixture: {e}")))?;
                DataSource::Gaussian { mixture, n: kv.parse("data.n")?.unwrap_or(20_000) }
            }
            "csv" => DataSource::Csv {
                path: resolve(kv.str("data.path").ok_or_else(|| missing("data.path", "csv data"))?),
                classes: kv.parse("data.classes")?,
            },
            other => return Err(bad("data.source", other)),
        };
        let anchor_removal = match kv.str("data.anchor_removal") {
            None | Some("none") => 0.0,
            Some(s) => match ANCHOR_REMOVAL_PRESETS.iter().find(|(name, _)| *name == s) {
                Some((_, q)) => *q,
                None => s.parse::<f64>().map_err(|_| bad("data.anchor_removal", s))?,
            },
        };
        if !(0.0..1.0).contains(&anchor_removal) {
            return Err(CliError::Config(format!("data.anchor_removal must lie in [0, 1), got {anchor_removal}")));
        }
        let data = DataConfig {
            source,
            anchor_removal,
            balance: kv.parse("data.balance")?.unwrap_or(false),
            val_fraction: fraction(
                kv.parse("data.val_fraction")?.unwrap_or(DEFAULT_VAL_FRACTION),
                "data.val_fraction",
            )?,
            test_fraction: fraction(
                kv.parse("data.test_fraction")?.unwrap_or(DEFAULT_TEST_FRACTION),
                "data.test_fraction",
            )?,
        };

        let noise = match kv.str("noise.kind").unwrap_or("symmetric") {
            "symmetric" => NoiseConfig::Symmetric(kv.parse("noise.rate")?.unwrap_or(0.2)),
            "pair" => NoiseConfig::Pair(kv.parse("noise.rate")?.unwrap_or(0.45)),
            "custom" => NoiseConfig::Custom(resolve(
                kv.str("noise.matrix").ok_or_else(|| missing("noise.matrix", "custom noise"))?,
            )),
            other => return Err(bad("noise.kind", other)),
        };
        if matches!(noise, NoiseConfig::Custom(_)) && kv.has("noise.rate") {
            return Err(CliError::Config("noise.rate does not apply to custom noise".into()));
        }

        let defaults = TrainConfig::default();
        let classifier_optimizer = optimizer(kv, "classifier", "sgd", defaults.classifier_optimizer)?;
        let transition_optimizer = optimizer(kv, "transition", "adam", defaults.transition_optimizer)?;
        let lr_schedule = match kv.str("train.lr_schedule") {
            None => defaults.lr_schedule.clone(),
            Some("none") => Vec::new(),
            Some(s) => parse_schedule(s)?,
        };
        let selection = match kv.str("train.selection") {
            None => defaults.selection,
            Some(s) => SelectionMetric::parse(s).ok_or_else(|| bad("train.selection", s))?,
        };
        let train = TrainConfig {
            lambda: kv.parse("train.lambda")?.unwrap_or(DEFAULT_LAMBDA),
            epochs: kv.parse("train.epochs")?.unwrap_or(defaults.epochs),
            batch_size: kv.parse("train.batch_size")?.unwrap_or(defaults.batch_size),
            seed: 0,
            classifier_optimizer,
            transition_optimizer,
            lr_schedule,
            selection,
        };
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let model = model_spec(kv, "train", None)?;
        let transition_init = match kv.str("train.transition_init") {
            None | Some("default") => None,
            Some(s) => {
                Some(s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("train.transition_init", s))?)
            }
        };

        let methods = match kv.str("estimators.methods") {
            None => vec![Method::AnchorMax, Method::AnchorPercentile],
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|m| !m.is_empty())
                .map(|m| match m {
                    "anchor-max" => Ok(Method::AnchorMax),
                    "anchor-percentile" => Ok(Method::AnchorPercentile),
                    other => Err(bad("estimators.methods", other)),
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        let alpha = kv.parse("estimators.alpha")?.unwrap_or(DEFAULT_ALPHA);
        if !(alpha > 0.0 && alpha < 100.0) {
            return Err(CliError::Config(format!("estimators.alpha must lie in (0, 100), got {alpha}")));
        }
        let estimators = EstimatorConfig { methods, alpha, model: model_spec(kv, "estimators", Some(&model))? };

        let g = ScatterSettings::default();
        let geometry = ScatterSettings {
            rays: kv.parse("geometry.rays")?.unwrap_or(g.rays),
            condition1_tol: kv.parse("geometry.condition1_tol")?.unwrap_or(g.condition1_tol),
            trials: kv.parse("geometry.trials")?.unwrap_or(g.trials),
            condition2_tol: kv.parse("geometry.condition2_tol")?.unwrap_or(g.condition2_tol),
            delta: kv.parse("geometry.delta")?.unwrap_or(g.delta),
            max_search_columns: kv.parse("geometry.max_search_columns")?.unwrap_or(g.max_search_columns),
            seed: 0,
        };
        if geometry.rays == 0 || geometry.trials == 0 {
            return Err(CliError::Config("geometry.rays and geometry.trials must be >= 1".into()));
        }

        let seeds = match kv.str("trials.seeds") {
            None => (0..DEFAULT_REPETITIONS as u64).collect(),
            Some(s) => parse_list::<u64>("trials.seeds", s)?,
        };
        if seeds.is_empty() {
            return Err(CliError::Config("trials.seeds is empty".into()));
        }
        let output_dir = resolve(kv.str("output.dir").unwrap_or("out"));

        Ok(Self {
            data,
            noise,
            train,
            model,
            transition_init,
            estimators,
            geometry,
            seeds,
            output_dir,
            source_text: text.to_string(),
        })
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("{key}: invalid value '{value}'"))
}

fn missing(key: &str, what: &str) -> CliError {
    CliError::Config(format!("{key} is required for {what}"))
}

fn fraction(v: f64, key: &str) -> Result<f64, CliError> {
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{key} must lie in [0, 1), got {v}")))
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| t.parse::<T>().map_err(|_| bad(key, t))).collect()
}

fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (e, d) = t.split_once(':').ok_or_else(|| bad("train.lr_schedule", t))?;
            let epoch = e.trim().parse::<usize>().map_err(|_| bad("train.lr_schedule", t))?;
            let divisor = d.trim().parse::<f64>().map_err(|_| bad("train.lr_schedule", t))?;
            Ok((epoch, divisor))
        })
        .collect()
}

fn model_spec(kv: &Entries, section: &str, fallback: Option<&ModelSpec>) -> Result<ModelSpec, CliError> {
    let arch_key = format!("{section}.architecture");
    let hidden_key = format!("{section}.hidden");
    let map_key = format!("{section}.input_map");
    let hidden_list = match kv.str(&hidden_key) {
        Some(s) => Some(parse_list::<usize>(&hidden_key, s)?),
        None => None,
    };
    let hidden = match kv.str(&arch_key) {
        Some("softmax-linear") => {
            if hidden_list.is_some() {
                return Err(CliError::Config(format!("{hidden_key} does not apply to softmax-linear")));
            }
            None
        }
        Some("mlp") => Some(hidden_list.unwrap_or_else(|| vec![32])),
        Some(other) => return Err(bad(&arch_key, other)),
        None => match (fallback, hidden_list) {
            (_, Some(h)) => Some(h),
            (Some(f), None) => f.hidden.clone(),
            (None, None) => Some(vec![32]),
        },
    };
    if let Some(h) = &hidden {
        if h.is_empty() || h.len() > 2 || h.contains(&0) {
            return Err(CliError::Config(format!("{hidden_key}: one or two positive widths expected")));
        }
    }
    let input_map = match kv.str(&map_key) {
        None => InputMap::Identity,
        Some(s) => InputMap::parse(s).ok_or_else(|| bad(&map_key, s))?,
    };
    Ok(ModelSpec { hidden, input_map })
}

fn optimizer(
    kv: &Entries,
    who: &str,
    default_kind: &str,
    default: OptimizerConfig,
) -> Result<OptimizerConfig, CliError> {
    let kind_key = format!("train.{who}_optimizer");
    let lr_key = format!("train.{who}_lr");
    let mom_key = format!("train.{who}_momentum");
    let wd_key = format!("train.{who}_weight_decay");
    let kind = kv.str(&kind_key).unwrap_or(default_kind).to_string();
    let lr: Option<f64> = kv.parse(&lr_key)?;
    let momentum: Option<f64> = kv.parse(&mom_key)?;
    // Only the classifier has a weight-decay key; the transition never decays.
    let weight_decay: Option<f64> = if who == "classifier" { kv.parse(&wd_key)? } else { None };
    let cfg = match kind.as_str() {
        "sgd" => {
            let (dlr, dm, dwd) = match default {
                OptimizerConfig::Sgd { lr, momentum, weight_decay } => (lr, momentum, weight_decay),
                OptimizerConfig::Adam { lr, .. } => (lr, 0.9, 0.0),
            };
            OptimizerConfig::sgd(lr.unwrap_or(dlr), momentum.unwrap_or(dm), weight_decay.unwrap_or(dwd))
        }
        "adam" => {
            if momentum.is_some() || weight_decay.is_some() {
                return Err(CliError::Config(format!("{mom_key} / {wd_key} only apply to sgd")));
            }
            OptimizerConfig::adam(lr.unwrap_or(default.lr()))
        }
        other => return Err(bad(&kind_key, other)),
    };
    let (lr, m) = match cfg {
        OptimizerConfig::Sgd { lr, momentum, .. } => (lr, momentum),
        OptimizerConfig::Adam { lr, .. } => (lr, 0.0),
    };
    if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&m) {
        return Err(CliError::Config(format!("train.{who}_*: learning rate must be > 0 and momentum in [0, 1)")));
    }
    Ok(cfg)
}

/// Raw `key = value` pairs with the line each came from.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn read(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line_no}: expected 'section.key = value'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !SCHEMA.iter().any(|(known, _)| *known == k) {
                return Err(CliError::Config(format!("line {line_no}: unknown key '{k}'")));
            }
            if v.is_empty() {
                return Err(CliError::Config(format!("line {line_no}: empty value for '{k}'")));
            }
            if let Some((first, _)) = map.insert(k.to_string(), (line_no, v.to_string())) {
                return Err(CliError::Config(format!("line {line_no}: '{k}' already set on line {first}")));
            }
        }
        Ok(Self { map })
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.map.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Config(format!("line {line}: {key}: cannot parse '{v}'"))),
        }
    }

    fn matrix(&self, key: &str) -> Result<Option<Matrix>, CliError> {
        let Some(s) = self.str(key) else { return Ok(None) };
        let rows = s.split(';').map(|r| parse_list::<f64>(key, r)).collect::<Result<Vec<_>, _>>()?;
        Matrix::from_rows(&rows).map(Some).map_err(|e| CliError::Config(format!("{key}: {e}")))
    }
}
