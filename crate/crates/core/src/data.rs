//! Synthetic datasets with known clean posteriors, anchor removal, class
//! balancing, splits and CSV IO.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::linalg::{cholesky, LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cap {cap} must lie in (1/C, 1] for C = {classes}")]
    BadCap { cap: f64, classes: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid generator parameters: {0}")]
    BadParams(String),
    #[error("{0} requires a posterior (none stored and none supplied)")]
    MissingPosterior(&'static str),
    #[error("{0} requires noisy labels")]
    MissingNoisyLabels(&'static str),
    #[error("fraction {0} outside the allowed range")]
    BadFraction(f64),
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
    #[error("{path}: line {line}: {msg}")]
    Csv { path: String, line: u64, msg: String },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n × d features.
    pub x: Matrix,
    pub y_clean: Vec<usize>,
    pub y_noisy: Option<Vec<usize>>,
    /// n × C, rows on the simplex. Present for synthetic data.
    pub clean_posterior: Option<Matrix>,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y_clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_clean.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.len();
        if self.x.rows() != n {
            return Err(DataError::Inconsistent(format!("{} feature rows for {n} labels", self.x.rows())));
        }
        let check = |labels: &[usize], what: &str| -> Result<(), DataError> {
            if labels.len() != n {
                return Err(DataError::Inconsistent(format!("{what} has {} entries, expected {n}", labels.len())));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= self.classes) {
                return Err(DataError::Inconsistent(format!("{what} label {l} is not below {}", self.classes)));
            }
            Ok(())
        };
        check(&self.y_clean, "y_clean")?;
        if let Some(noisy) = &self.y_noisy {
            check(noisy, "y_noisy")?;
        }
        if let Some(post) = &self.clean_posterior {
            if post.shape() != (n, self.classes) {
                return Err(DataError::Inconsistent(format!("posterior is {}x{}", post.rows(), post.cols())));
            }
            for r in 0..n {
                let row = post.row(r);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|v| *v < -1e-9) {
                    return Err(DataError::Inconsistent(format!("posterior row {r} is off the simplex")));
                }
            }
        }
        Ok(())
    }

    /// Rows `idx` in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y_clean: idx.iter().map(|&i| self.y_clean[i]).collect(),
            y_noisy: self.y_noisy.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            clean_posterior: self.clean_posterior.as_ref().map(|p| p.select_rows(idx)),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn with_provenance(mut self, note: &str) -> Dataset {
        if self.provenance.is_empty() {
            self.provenance = note.to_string();
        } else {
            self.provenance = format!("{}; {note}", self.provenance);
        }
        self
    }

    pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimplexProfile {
    /// Dirichlet(0.3): mass piles up near the vertices.
    CornerRich,
    /// Points on or near the pairwise edges, spread around the midpoints.
    EdgeScattered,
    /// Dirichlet(5): mass concentrated around the barycenter.
    CenterHeavy,
}

impl SimplexProfile {
    pub fn name(self) -> &'static str {
        match self {
            SimplexProfile::CornerRich => "corner-rich",
            SimplexProfile::EdgeScattered => "edge-scattered",
            SimplexProfile::CenterHeavy => "center-heavy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "corner-rich" => Some(SimplexProfile::CornerRich),
            "edge-scattered" => Some(SimplexProfile::EdgeScattered),
            "center-heavy" => Some(SimplexProfile::CenterHeavy),
            _ => None,
        }
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, classes: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let g: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return g.into_iter().map(|v| v / sum).collect();
        }
    }
}

/// Shrinks `p` toward the barycenter until its largest entry equals `cap`.
fn apply_cap(p: &mut [f64], cap: f64) {
    let c = p.len() as f64;
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > cap {
        let s = (cap - 1.0 / c) / (max - 1.0 / c);
        for v in p.iter_mut() {
            *v = 1.0 / c + s * (*v - 1.0 / c);
        }
        // guard against rounding pushing the max back above the cap
        let new_max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if new_max > cap {
            let k = p.iter().position(|v| *v == new_max).unwrap();
            p[k] = cap;
        }
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return i;
        }
    }
    p.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

/// Features are the clean posterior itself (d = C).
pub fn gen_simplex_feature(
    classes: usize,
    n: usize,
    cap: f64,
    profile: SimplexProfile,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::TooFewClasses(classes));
    }
    if !(cap > 1.0 / classes as f64 && cap <= 1.0) {
        return Err(DataError::BadCap { cap, classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut post = Vec::with_capacity(n * classes);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = match profile {
            SimplexProfile::CornerRich => dirichlet(&mut rng, classes, 0.3),
            SimplexProfile::CenterHeavy => dirichlet(&mut rng, classes, 5.0),
            SimplexProfile::EdgeScattered => {
                let i = rng.random_range(0..classes);
                let mut j = rng.random_range(0..classes - 1);
                if j >= i {
                    j += 1;
                }
                let (lo, hi) = if cap >= 0.5 { (1.0 - cap, cap) } else { (0.5, 0.5) };
                let t = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let mut p = vec![0.0; classes];
                p[i] = t;
                p[j] = 1.0 - t;
                // Half the points sit exactly on an edge, the rest drift inward.
                if rng.random_bool(0.5) {
                    let s = rng.random_range(0.0..0.25);
                    let q = dirichlet(&mut rng, classes, 1.0);
                    for (pk, qk) in p.iter_mut().zip(&q) {
                        *pk = (1.0 - s) * *pk + s * qk;
                    }
                }
                p
            }
        };
        apply_cap(&mut p, cap);
        labels.push(sample_categorical(&mut rng, &p));
        post.extend_from_slice(&p);
    }
    let posterior = Matrix::new(n, classes, post)?;
    Ok(Dataset {
        x: posterior.clone(),
        y_clean: labels,
        y_noisy: None,
        clean_posterior: Some(posterior),
        classes,
        provenance: format!("simplex-feature C={classes} n={n} cap={cap} profile={} seed={seed}", profile.name()),
    })
}

/// Parameters of a Gaussian mixture with a shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// C × d
    pub means: Matrix,
    /// d × d, symmetric positive definite
    pub covariance: Matrix,
    pub priors: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Matrix, covariance: Matrix, priors: Vec<f64>) -> Result<Self, DataError> {
        let (c, d) = means.shape();
        if c < 2 {
            return Err(DataError::TooFewClasses(c));
        }
        if covariance.shape() != (d, d) {
            return Err(DataError::BadParams(format!("covariance must be {d}x{d}")));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 {
                    return Err(DataError::BadParams("covariance is not symmetric".into()));
                }
            }
        }
        cholesky(&covariance).map_err(|_| DataError::BadParams("covariance is not positive definite".into()))?;
        if priors.len() != c || priors.iter().any(|p| *p < 0.0) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadParams("priors must be a probability vector over the classes".into()));
        }
        Ok(Self { means, covariance, priors })
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Bayes posterior `P(Y | X = x)` in closed form.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let l = cholesky(&self.covariance).expect("validated on construction");
        let logits: Vec<f64> = (0..self.classes())
            .map(|k| {
                let diff: Vec<f64> = x.iter().zip(self.means.row(k)).map(|(a, b)| a - b).collect();
                let z = forward_substitute(&l, &diff);
                self.priors[k].ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        crate::model::softmax(&logits)
    }
}

fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * z[k]).sum();
        z[i] = (b[i] - s) / l[(i, i)];
    }
    z
}

pub fn gen_gaussian_mixture(mix: &GaussianMixture, n: usize, seed: u64) -> Result<Dataset, DataError> {
    let (c, d) = (mix.classes(), mix.dim());
    let l = cholesky(&mix.covariance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * d);
    let mut post = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        // The generating component is a draw from P(Y | X = x) given x.
        let k = sample_categorical(&mut rng, &mix.priors);
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..d).map(|i| mix.means[(k, i)] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>()).collect();
        post.extend(mix.posterior(&x));
        xs.extend(x);
        labels.push(k);
    }
    Ok(Dataset {
        x: Matrix::new(n, d, xs)?,
        y_clean: labels,
        y_noisy: None,
        clean_posterior: Some(Matrix::new(n, c, post)?),
        classes: c,
        provenance: format!("gaussian-mixture C={c} d={d} n={n} seed={seed}"),
    })
}

/// Drops, per clean class j, the `⌈q·n_j⌉` instances with the largest
/// posterior for j. Uses `posterior` when given, else the stored clean one.
pub fn remove_anchor_candidates(ds: &Dataset, q: f64, posterior: Option<&Matrix>) -> Result<Dataset, DataError> {
    if !(0.0..1.0).contains(&q) {
        return Err(DataError::BadFraction(q));
    }
    let post = posterior.or(ds.clean_posterior.as_ref()).ok_or(DataError::MissingPosterior("anchor removal"))?;
    if post.shape() != (ds.len(), ds.classes) {
        return Err(DataError::Inconsistent("posterior shape does not match dataset".into()));
    }
    let mut drop = vec![false; ds.len()];
    for j in 0..ds.classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.y_clean[i] == j).collect();
        let k = (q * members.len() as f64).ceil() as usize;
        // Descending by posterior, ties by index.
        members.sort_by(|&a, &b| post[(b, j)].total_cmp(&post[(a, j)]).then(a.cmp(&b)));
        for &i in members.iter().take(k) {
            drop[i] = true;
        }
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| !drop[i]).collect();
    Ok(ds.subset(&keep).with_provenance(&format!("anchor-removal q={q}")))
}

/// Keeps, per noisy class, a seeded random subset of the smallest class size.
pub fn balanced_undersample(ds: &Dataset, seed: u64) -> Result<Dataset, DataError> {
    let noisy = ds.y_noisy.as_ref().ok_or(DataError::MissingNoisyLabels("balanced undersampling"))?;
    let counts = Dataset::class_counts(noisy, ds.classes);
    let target = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for j in 0..ds.classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| noisy[i] == j).collect();
        members.shuffle(&mut rng);
        keep.extend(members.into_iter().take(target));
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep).with_provenance(&format!("balanced seed={seed}")))
}

/// Seeded shuffle, then the first `n − round(f·n)` rows train and the rest validate.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::BadFraction(val_fraction));
    }
    let n = ds.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val) = idx.split_at(n - n_val);
    Ok((
        ds.subset(train).with_provenance(&format!("split train seed={seed}")),
        ds.subset(val).with_provenance(&format!("split validation seed={seed}")),
    ))
}

pub fn posterior_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.posterior.csv"))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), msg: e.to_string() }
}

fn fmt_f64(v: f64) -> String {
    // Debug formatting is the shortest string that round-trips exactly.
    format!("{v:?}")
}

/// Writes `path` and, when a posterior is present, its sibling posterior file.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("x{i}")).collect();
    header.push("y_clean".into());
    if ds.y_noisy.is_some() {
        header.push("y_noisy".into());
    }
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(r).iter().map(|v| fmt_f64(*v)).collect();
        rec.push(ds.y_clean[r].to_string());
        if let Some(noisy) = &ds.y_noisy {
            rec.push(noisy[r].to_string());
        }
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;

    if let Some(post) = &ds.clean_posterior {
        let ppath = posterior_path(path);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&ppath)
            .map_err(|e| io_err(&ppath, e))?;
        let header: Vec<String> = (0..post.cols()).map(|i| format!("p{i}")).collect();
        w.write_record(&header).map_err(|e| io_err(&ppath, e))?;
        for r in 0..post.rows() {
            w.write_record(post.row(r).iter().map(|v| fmt_f64(*v))).map_err(|e| io_err(&ppath, e))?;
        }
        w.flush().map_err(|e| io_err(&ppath, e))?;
    }
    Ok(())
}

/// Header plus `(line, fields)` per record.
type Table = (Vec<String>, Vec<(u64, Vec<String>)>);

fn read_table(path: &Path) -> Result<Table, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Csv {
            path: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

/// Reads a dataset CSV. The class count comes from the posterior file when
/// present, else `classes`, else the largest label plus one.
pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Dataset, DataError> {
    let (header, rows) = read_table(path)?;
    let csv_err = |line: u64, msg: String| DataError::Csv { path: path.display().to_string(), line, msg };
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let has_clean = header.get(d).map(String::as_str) == Some("y_clean");
    if !has_clean {
        return Err(csv_err(1, "header must be x0..x{d-1},y_clean[,y_noisy]".into()));
    }
    let has_noisy = header.get(d + 1).map(String::as_str) == Some("y_noisy");
    let width = d + 1 + usize::from(has_noisy);
    if header.len() != width {
        return Err(csv_err(1, format!("unexpected columns after {}", header[width - 1])));
    }
    let mut xs = Vec::with_capacity(rows.len() * d);
    let mut y_clean = Vec::with_capacity(rows.len());
    let mut y_noisy = Vec::new();
    for (line, row) in &rows {
        if row.len() != width {
            return Err(csv_err(*line, format!("expected {width} fields, found {}", row.len())));
        }
        for tok in &row[..d] {
            let v: f64 = tok.trim().parse().map_err(|_| csv_err(*line, format!("invalid number {tok:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(*line, format!("non-finite feature {tok:?}")));
            }
            xs.push(v);
        }
        let label =
            |tok: &str| tok.trim().parse::<usize>().map_err(|_| csv_err(*line, format!("invalid label {tok:?}")));
        y_clean.push(label(&row[d])?);
        if has_noisy {
            y_noisy.push(label(&row[d + 1])?);
        }
    }
    let n = y_clean.len();
    let ppath = posterior_path(path);
    let clean_posterior = if ppath.exists() {
        let (pheader, prow) = read_table(&ppath)?;
        let c = pheader.len();
        let mut vals = Vec::with_capacity(prow.len() * c);
        for (line, row) in &prow {
            if row.len() != c {
                return Err(DataError::Csv {
                    path: ppath.display().to_string(),
                    line: *line,
                    msg: format!("expected {c} fields"),
                });
            }
            for tok in row {
                vals.push(tok.trim().parse::<f64>().map_err(|_| DataError::Csv {
                    path: ppath.display().to_string(),
                    line: *line,
                    msg: format!("invalid number {tok:?}"),
                })?);
            }
        }
        Some(Matrix::new(prow.len(), c, vals)?)
    } else {
        None
    };
    let max_label = y_clean.iter().chain(&y_noisy).copied().max().unwrap_or(0);
    let classes = clean_posterior.as_ref().map(Matrix::cols).or(classes).unwrap_or((max_label + 1).max(2));
    let ds = Dataset {
        x: Matrix::new(n, d, xs)?,
        y_clean,
        y_noisy: has_noisy.then_some(y_noisy),
        clean_posterior,
        classes,
        provenance: format!("csv {}", path.display()),
    };
    ds.validate()?;
    Ok(ds)
}
