//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset
//! (`cargo test -p volmin-cli --test acceptance -- 3 5`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volmin_cli::commands::{corrupt_dataset, generate_dataset, run_anchor, run_volmin, split_dataset, THREADS_ENV};
use volmin_cli::config::{Method, ANCHOR_REMOVAL_PRESETS, DEFAULT_REPETITIONS, DEFAULT_VAL_FRACTION};
use volmin_cli::ExperimentConfig;
use volmin_core::data::gen_simplex_feature;
use volmin_core::geometry::{
    anchor_presence, check_condition1, check_condition2, minvol_interval_oracle, sample_r_rays, PosteriorMatrix,
};
use volmin_core::linalg::inverse_transpose;
use volmin_core::trainer::{loss_and_grads, train, Batch, Targets, TrainSetup, TransitionModel};
use volmin_core::transition::volume;
use volmin_core::{
    Architecture, ClassifierParams, InputMap, Matrix, OptimizerConfig, SimplexProfile, TrainConfig, TrainableTransition,
};

// Tolerances.
const C1_FD_STEP: f64 = 1e-6;
const C1_REL_TOL: f64 = 1e-4;
const C1_LOGDET_REL_TOL: f64 = 1e-6;
/// Denominator floor for relative errors of near-zero gradients.
const C1_REL_FLOOR: f64 = 1e-8;
const C2_SAMPLES: usize = 10_000;
const C2_COLSUM_TOL: f64 = 1e-12;
const C2_INIT_TOL: f64 = 1e-12;
const C3_ERROR_MAX: f64 = 0.05;
const C3_ANCHOR_RATIO: f64 = 2.0;
const C3_POSTERIOR_MAX: f64 = 0.05;
const C3_DELTA: f64 = 0.05;
const C3_RAYS: usize = 512;
const C3_COND1_TOL: f64 = 1e-6;
const C4_ERROR_MAX: f64 = 0.05;
const C5_ORACLE_TOL: f64 = 0.02;
const C5_GRID_STEP: f64 = 1e-3;
const C5_LAMBDA: f64 = 1e-2;
const C6_RAYS: usize = 512;
const C6_COND1_TOL: f64 = 1e-6;
const C6_RAY_FLOOR: f64 = -1e-9;
const C6_TRIALS: usize = 10_000;
const C6_COND2_TOL: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(C1_REL_FLOOR)
}

// ---------------------------------------------------------------------------
// 1. gradient exactness

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_logdet = 0.0f64;
    let mut instances = 0;
    for c in [2, 3, 5] {
        for d in [2, 4] {
            for mlp in [false, true] {
                for input_map in [InputMap::Identity, InputMap::Log] {
                    let arch = if mlp {
                        Architecture::Mlp { inputs: d, hidden: vec![4], classes: c }
                    } else {
                        Architecture::SoftmaxLinear { inputs: d, classes: c }
                    };
                    let params = ClassifierParams::init(arch, input_map, rng.random()).unwrap();
                    let tt =
                        TrainableTransition::new(Matrix::from_fn(c, c, |_, _| rng.random_range(-2.0..2.0))).unwrap();
                    let n = rng.random_range(1..=8);
                    let x = Matrix::from_fn(n, d, |_, _| rng.random_range(0.05..1.0));
                    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
                    let batch = Batch::new(x, Targets::Hard(y)).unwrap();
                    let idx: Vec<usize> = (0..n).collect();
                    let lambda = 0.3;
                    let loss = |tt: &TrainableTransition, p: &ClassifierParams| {
                        loss_and_grads(&batch, &idx, &TransitionModel::Learnable(tt.clone()), p, lambda).unwrap().loss
                    };
                    let lg =
                        loss_and_grads(&batch, &idx, &TransitionModel::Learnable(tt.clone()), &params, lambda).unwrap();
                    let gw = lg.grad_w.unwrap();

                    let logdet_grad = tt.backward(&inverse_transpose(tt.realize().matrix()).unwrap());
                    for i in 0..c {
                        for j in (0..c).filter(|&j| j != i) {
                            let shifted = |delta: f64| {
                                let mut w = tt.weights().clone();
                                w[(i, j)] += delta;
                                TrainableTransition::new(w).unwrap()
                            };
                            let (plus, minus) = (shifted(C1_FD_STEP), shifted(-C1_FD_STEP));
                            let fd = (loss(&plus, &params) - loss(&minus, &params)) / (2.0 * C1_FD_STEP);
                            worst = worst.max(rel_err(gw[(i, j)], fd));
                            let fd_ld = (volume(&plus.realize()).log_abs - volume(&minus.realize()).log_abs)
                                / (2.0 * C1_FD_STEP);
                            worst_logdet = worst_logdet.max(rel_err(logdet_grad[(i, j)], fd_ld));
                        }
                    }
                    for (b, block) in lg.grad_theta.blocks.iter().enumerate() {
                        for (k, &analytic) in block.iter().enumerate() {
                            let shifted = |delta: f64| {
                                let mut p = params.clone();
                                p.blocks_mut()[b][k] += delta;
                                p
                            };
                            let fd = (loss(&tt, &shifted(C1_FD_STEP)) - loss(&tt, &shifted(-C1_FD_STEP)))
                                / (2.0 * C1_FD_STEP);
                            worst = worst.max(rel_err(analytic, fd));
                        }
                    }
                    instances += 1;
                }
            }
        }
    }
    Verdict {
        pass: worst < C1_REL_TOL && worst_logdet < C1_LOGDET_REL_TOL,
        detail: format!(
            "{instances} instances; max rel err {worst:.2e} (< {C1_REL_TOL:e}), log|det| term {worst_logdet:.2e} (< {C1_LOGDET_REL_TOL:e})"
        ),
    }
}

// ---------------------------------------------------------------------------
// 2. construction invariants

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_colsum = 0.0f64;
    let mut min_margin = f64::INFINITY;
    for s in 0..C2_SAMPLES {
        let c = rng.random_range(2..=20);
        // Every fourth sample uses very large weights to reach the sigmoid's flat ends.
        let scale = if s % 4 == 0 { 200.0 } else { 5.0 };
        let w = Matrix::from_fn(c, c, |_, _| rng.random_range(-scale..scale));
        let t = TrainableTransition::new(w).unwrap().realize();
        worst_colsum = worst_colsum.max(t.column_sum_error());
        min_margin = min_margin.min(t.dominance_margin());
    }
    let mut worst_init = 0.0f64;
    for c in 3..=20 {
        let t = TrainableTransition::constant(c, (1.0 / (c as f64 - 2.0)).ln()).realize();
        let off = 1.0 / (2.0 * (c as f64 - 1.0));
        for i in 0..c {
            for j in 0..c {
                let want = if i == j { 0.5 } else { off };
                worst_init = worst_init.max((t[(i, j)] - want).abs());
            }
        }
    }
    Verdict {
        pass: worst_colsum <= C2_COLSUM_TOL && min_margin > 0.0 && worst_init <= C2_INIT_TOL,
        detail: format!(
            "{C2_SAMPLES} samples; max |colsum-1| {worst_colsum:.1e}, min dominance margin {min_margin:.1e}, init deviation {worst_init:.1e}"
        ),
    }
}

// ---------------------------------------------------------------------------
// 3 and 4. pipelines over five seeds

#[derive(Default)]
struct PipelineSummary {
    volmin: Vec<f64>,
    anchor_max: Vec<f64>,
    posterior: Vec<f64>,
    condition1: Vec<bool>,
    anchors_present: Vec<bool>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn run_pipeline(config: &str) -> PipelineSummary {
    let cfg = ExperimentConfig::load(&configs_dir().join(config)).unwrap();
    let mut s = PipelineSummary::default();
    for &seed in &cfg.seeds {
        let ds = generate_dataset(&cfg, seed).unwrap();
        let h = PosteriorMatrix::from_rows(ds.clean_posterior.as_ref().unwrap()).unwrap();
        let rays = sample_r_rays(h.classes(), C3_RAYS, seed);
        s.condition1.push(check_condition1(&h, &rays, C3_COND1_TOL).1);
        s.anchors_present.push(anchor_presence(&h, C3_DELTA).1);

        let (noisy, t) = corrupt_dataset(&cfg, &ds, seed).unwrap();
        let splits = split_dataset(&cfg, &noisy, seed).unwrap();
        let vm = run_volmin(&cfg, &splits, Some(t.matrix()), seed).unwrap();
        s.volmin.push(vm.estimation_error.unwrap());
        s.posterior.push(vm.posterior_error.unwrap());
        let anchor = run_anchor(&cfg, &splits, Some(t.matrix()), seed, false).unwrap();
        let max = anchor.estimates.iter().find(|e| e.method == Method::AnchorMax).unwrap();
        s.anchor_max.push(max.estimation_error.unwrap());
    }
    s
}

fn criterion_3() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, config) in [("pair", "identifiability_pair.conf"), ("symmetric", "identifiability_symmetric.conf")] {
        let s = run_pipeline(config);
        let (vm, am, pe) = (mean(&s.volmin), mean(&s.anchor_max), mean(&s.posterior));
        let geometry_ok = s.condition1.iter().all(|&b| b) && s.anchors_present.iter().all(|&b| !b);
        let checks = [
            ("geometry", geometry_ok),
            ("volmin<0.05", vm < C3_ERROR_MAX),
            ("anchor>=2x", am >= C3_ANCHOR_RATIO * vm),
            ("ordering", vm < am),
            ("posterior<0.05", pe < C3_POSTERIOR_MAX),
        ];
        let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
        pass &= failed.is_empty();
        parts.push(format!(
            "{label}: volmin {vm:.3} [{}], anchor-max {am:.3} [{}], |h-p| {pe:.3}{}",
            fmt_list(&s.volmin),
            fmt_list(&s.anchor_max),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(",")) }
        ));
    }
    Verdict { pass, detail: parts.join("; ") }
}

fn criterion_4() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, config) in [("pair", "anchors_pair.conf"), ("symmetric", "anchors_symmetric.conf")] {
        let s = run_pipeline(config);
        let (vm, am) = (mean(&s.volmin), mean(&s.anchor_max));
        let anchors = s.anchors_present.iter().all(|&b| b);
        let ok = anchors && vm < C4_ERROR_MAX && am < C4_ERROR_MAX;
        pass &= ok;
        parts.push(format!(
            "{label}: volmin {vm:.3} [{}], anchor-max {am:.3} [{}], anchors present {anchors}",
            fmt_list(&s.volmin),
            fmt_list(&s.anchor_max)
        ));
    }
    Verdict { pass, detail: parts.join("; ") }
}

// ---------------------------------------------------------------------------
// 5. two-class oracle

/// Exhaustive search over the 1e-3 grid of 2×2 column-stochastic matrices
/// [[a, b], [1−a, 1−b]] with a > 1/2 > b, minimizing det = a − b subject to
/// every noisy posterior lying in [b, a].
fn grid_minvol(noisy_p1: &[f64]) -> (f64, f64) {
    let max = noisy_p1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = noisy_p1.iter().copied().fold(f64::INFINITY, f64::min);
    let steps = (1.0 / C5_GRID_STEP).round() as usize;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for ia in 0..=steps {
        let a = ia as f64 * C5_GRID_STEP;
        if a <= 0.5 || a < max {
            continue;
        }
        for ib in 0..=steps {
            let b = ib as f64 * C5_GRID_STEP;
            if b >= 0.5 || b > min {
                continue;
            }
            if a - b < best.0 {
                best = (a - b, a, b);
            }
        }
    }
    (best.1, best.2)
}

fn criterion_5() -> Verdict {
    let n = 4000;
    let ds = gen_simplex_feature(2, n, 0.8, SimplexProfile::CornerRich, 1).unwrap();
    let t = Matrix::from_rows(&[vec![0.8, 0.3], vec![0.2, 0.7]]).unwrap();
    let soft = Matrix::from_fn(n, 2, |i, k| t.mat_vec(ds.x.row(i)).unwrap()[k]);
    let noisy_p1: Vec<f64> = (0..n).map(|i| soft[(i, 0)]).collect();
    let oracle = minvol_interval_oracle(&noisy_p1).unwrap();
    let (ga, gb) = grid_minvol(&noisy_p1);
    let grid_gap = (oracle[(0, 0)] - ga).abs().max((oracle[(0, 1)] - gb).abs());

    let config = TrainConfig {
        lambda: C5_LAMBDA,
        classifier_optimizer: OptimizerConfig::sgd(1e-2, 0.9, 1e-3),
        // Constant rates: the step decay freezes T̂ before it reaches the optimum.
        lr_schedule: Vec::new(),
        ..TrainConfig::default()
    };
    let setup = TrainSetup {
        train: Batch::new(ds.x.clone(), Targets::Soft(soft)).unwrap(),
        validation: Batch::new(Matrix::zeros(0, 2), Targets::Soft(Matrix::zeros(0, 2))).unwrap(),
        transition: TransitionModel::Learnable(TrainableTransition::with_default_init(2)),
        classifier: ClassifierParams::init(Architecture::SoftmaxLinear { inputs: 2, classes: 2 }, InputMap::Log, 0)
            .unwrap(),
        true_t: None,
    };
    let out = train(setup, &config).unwrap();
    let t_hat = out.best.transition.realize();
    let gap = t_hat.matrix().max_abs_diff(oracle.matrix());
    Verdict {
        pass: gap < C5_ORACLE_TOL && grid_gap <= C5_GRID_STEP,
        detail: format!(
            "oracle [{:.4} {:.4}], grid [{ga:.3} {gb:.3}] (gap {grid_gap:.1e}), learned [{:.4} {:.4}], max entry gap {gap:.4} (< {C5_ORACLE_TOL})",
            oracle[(0, 0)],
            oracle[(0, 1)],
            t_hat[(0, 0)],
            t_hat[(0, 1)]
        ),
    }
}

// ---------------------------------------------------------------------------
// 6. geometry

fn criterion_6() -> Verdict {
    let mut failures = Vec::new();
    let mut min_ray = f64::INFINITY;
    for c in 2..=10 {
        let rays = sample_r_rays(c, C6_RAYS, c as u64);
        min_ray = rays.iter().flatten().copied().fold(min_ray, f64::min);
        let identity = PosteriorMatrix::new(Matrix::identity(c)).unwrap();
        if !check_condition1(&identity, &rays, C6_COND1_TOL).1 {
            failures.push(format!("H=I C={c} condition 1"));
        }
        let uniform = PosteriorMatrix::new(Matrix::from_fn(c, c, |_, _| 1.0 / c as f64)).unwrap();
        if check_condition1(&uniform, &rays, C6_COND1_TOL).1 {
            failures.push(format!("uniform C={c} passed condition 1"));
        }
    }
    if min_ray < C6_RAY_FLOOR {
        failures.push(format!("ray entry {min_ray:e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let interior = Matrix::from_fn(2, 200, |_, _| 0.0);
    let interior = {
        let mut m = interior;
        for col in 0..200 {
            let p: f64 = rng.random_range(0.3..0.7);
            m[(0, col)] = p;
            m[(1, col)] = 1.0 - p;
        }
        PosteriorMatrix::new(m).unwrap()
    };
    let interior_outcome = check_condition2(&interior, C6_TRIALS, 6, C6_COND2_TOL);
    if interior_outcome.witness.is_none() {
        failures.push("no witness for interior C=2 data".into());
    }
    let mut identity_trials = Vec::new();
    for c in [2, 3, 4] {
        let out = check_condition2(
            &PosteriorMatrix::new(Matrix::identity(c)).unwrap(),
            C6_TRIALS,
            60 + c as u64,
            C6_COND2_TOL,
        );
        if out.witness.is_some() {
            failures.push(format!("witness for H=I C={c}"));
        }
        identity_trials.push(out.trials);
    }
    Verdict {
        pass: failures.is_empty(),
        detail: format!(
            "min ray entry {min_ray:.2e}; interior witness after {} trials; H=I searched {:?} trials{}",
            interior_outcome.trials,
            identity_trials,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    }
}

// ---------------------------------------------------------------------------
// 7. protocol defaults

fn criterion_7() -> Verdict {
    let cfg = ExperimentConfig::parse("", Path::new(".")).unwrap();
    let presets: BTreeMap<&str, f64> = ANCHOR_REMOVAL_PRESETS.into_iter().collect();
    let na40 = ExperimentConfig::parse("data.anchor_removal = na40", Path::new(".")).unwrap();
    let na10 = ExperimentConfig::parse("data.anchor_removal = na10", Path::new(".")).unwrap();
    let init_ok = (3..=20).all(|c| cfg.transition_init_weight(c) == (1.0 / (c as f64 - 2.0)).ln());
    let checks = [
        ("lambda", cfg.train.lambda == 1e-4),
        ("init", init_ok),
        ("val_fraction", cfg.data.val_fraction == 0.1 && DEFAULT_VAL_FRACTION == 0.1),
        ("repetitions", cfg.seeds.len() == 5 && DEFAULT_REPETITIONS == 5),
        ("presets", presets.get("na40") == Some(&0.4) && presets.get("na10") == Some(&0.1)),
        ("preset parse", na40.data.anchor_removal == 0.4 && na10.data.anchor_removal == 0.1),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Verdict {
        pass: failed.is_empty(),
        detail: format!(
            "lambda {:e}, init ln(1/(C-2)), val fraction {}, {} seeds, presets na40/na10{}",
            cfg.train.lambda,
            cfg.data.val_fraction,
            cfg.seeds.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(",")) }
        ),
    }
}

// ---------------------------------------------------------------------------
// 8. determinism

const DETERMINISM_CONFIG: &str = "\
data.source = simplex
data.n = 1200
data.cap = 0.9
data.anchor_removal = na10
noise.kind = pair
noise.rate = 0.3
train.epochs = 8
train.input_map = log
estimators.input_map = identity
geometry.trials = 300
trials.seeds = 3,4
";

const COMMANDS: [&str; 6] = ["generate", "corrupt", "check-scattered", "train-volmin", "estimate-anchor", "sweep"];

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else if !path.to_string_lossy().ends_with(".timing.txt") {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

fn run_all(config: &Path, out: &Path) -> BTreeMap<String, Vec<u8>> {
    for cmd in COMMANDS {
        let status = Command::new(env!("CARGO_BIN_EXE_volmin"))
            .args([cmd, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .env(THREADS_ENV, "1")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "{cmd} failed");
    }
    let mut files = BTreeMap::new();
    collect_files(out, out, &mut files);
    files
}

fn criterion_8() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("det.conf");
    std::fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let a = run_all(&config, &dir.path().join("a"));
    let b = run_all(&config, &dir.path().join("b"));
    // Re-running into an existing directory must reproduce it too.
    let a2 = run_all(&config, &dir.path().join("a"));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k) || a2.get(*k) != a.get(*k)).collect();
    let same_names = a.keys().eq(b.keys()) && a.keys().eq(a2.keys());
    Verdict {
        pass: same_names && differing.is_empty() && !a.is_empty(),
        detail: format!(
            "{} commands x 3 runs, {} files compared (timing files excluded){}",
            COMMANDS.len(),
            a.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
        ),
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient exactness", criterion_1),
        (2, "construction invariants", criterion_2),
        (3, "identifiability without anchors", criterion_3),
        (4, "anchor-present sanity", criterion_4),
        (5, "two-class minimum-volume oracle", criterion_5),
        (6, "geometry suite", criterion_6),
        (7, "protocol defaults", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {status} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
