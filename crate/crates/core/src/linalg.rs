//! Dense small-matrix kernels.
//!
//! Everything here works on row-major `f64` storage. Matrices in this crate
//! are tiny (C×C transitions, C×m posterior sets, a few layer weights), so the
//! kernels favour clarity over blocking or SIMD.

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Pivot magnitudes below this are treated as exact zeros by the LU kernels.
pub const PIVOT_EPS: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch { op: &'static str, left_rows: usize, left_cols: usize, right_rows: usize, right_cols: usize },
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("matrix is singular (pivot below {PIVOT_EPS:e})")]
    Singular,
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for LinalgError {
    fn from(e: std::io::Error) -> Self {
        LinalgError::Io(e.to_string())
    }
}

/// Dense row-major matrix of finite `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { rows, cols, len: data.len() });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { row: idx / cols.max(1), col: idx % cols.max(1), value: data[idx] });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::BadLength { rows: r, cols: c, len: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Fills from `f(row, col)`. Callers are responsible for finiteness.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Column-major view of `columns` as a matrix whose j-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
            return Err(LinalgError::BadLength { rows, cols, len: bad.len() });
        }
        let m = Self::from_fn(rows, cols, |r, c| columns[c][r]);
        Self::new(rows, cols, m.data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Keeps the rows listed in `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "mat_vec",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: v.len(),
                right_cols: 1,
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// Matrix text format: one row per line, comma separated, `#` comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Matrix, LinalgError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    let tok = tok.trim();
                    tok.parse::<f64>()
                        .map_err(|_| LinalgError::Parse { line: i + 1, msg: format!("invalid number {tok:?}") })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(LinalgError::Parse {
                        line: i + 1,
                        msg: format!("expected {} entries, found {}", first.len(), row.len()),
                    });
                }
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(LinalgError::Parse { line: i + 1, msg: format!("non-finite entry {v}") });
            }
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }

    pub fn read_text(path: &Path) -> Result<Matrix, LinalgError> {
        Matrix::parse_text(&std::fs::read_to_string(path)?)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Packed LU factorization with partial pivoting.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    singular: bool,
}

impl Lu {
    fn factor(a: &Matrix, op: &'static str) -> Result<Lu, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare { op, rows: a.rows, cols: a.cols });
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut singular = false;
        for k in 0..n {
            let (p, pmax) =
                (k..n)
                    .map(|r| (r, lu[r * n + k].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax < PIVOT_EPS {
                singular = true;
                continue;
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, sign, singular })
    }

    /// Solves `A x = b` in place.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let s: f64 = (0..r).map(|c| self.lu[r * n + c] * x[c]).sum();
            x[r] -= s;
        }
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| self.lu[r * n + c] * x[c]).sum();
            x[r] = (x[r] - s) / self.lu[r * n + r];
        }
        x
    }
}

/// Sign and log-magnitude of a determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedLogDet {
    /// One of -1, 0 or +1.
    pub sign: i8,
    /// `ln|det|`; `-inf` when `sign == 0`.
    pub log_abs: f64,
}

impl SignedLogDet {
    pub fn det(&self) -> f64 {
        f64::from(self.sign) * self.log_abs.exp()
    }

    /// Determinant of a product: signs multiply, log-magnitudes add.
    pub fn combine(self, other: SignedLogDet) -> SignedLogDet {
        let sign = self.sign * other.sign;
        let log_abs = if sign == 0 { f64::NEG_INFINITY } else { self.log_abs + other.log_abs };
        SignedLogDet { sign, log_abs }
    }
}

pub fn signed_logdet(a: &Matrix) -> Result<SignedLogDet, LinalgError> {
    let lu = Lu::factor(a, "signed_logdet")?;
    if lu.singular {
        return Ok(SignedLogDet { sign: 0, log_abs: f64::NEG_INFINITY });
    }
    let mut sign = lu.sign;
    let mut log_abs = 0.0;
    for k in 0..lu.n {
        let d = lu.lu[k * lu.n + k];
        if d < 0.0 {
            sign = -sign;
        }
        log_abs += d.abs().ln();
    }
    Ok(SignedLogDet { sign: if sign > 0.0 { 1 } else { -1 }, log_abs })
}

pub fn inverse(a: &Matrix) -> Result<Matrix, LinalgError> {
    let lu = Lu::factor(a, "inverse")?;
    if lu.singular {
        return Err(LinalgError::Singular);
    }
    let n = lu.n;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = lu.solve(&e);
        for r in 0..n {
            inv[(r, c)] = col[r];
        }
    }
    if !inv.is_finite() {
        return Err(LinalgError::Singular);
    }
    Ok(inv)
}

/// `a^{-T}`, the gradient of `ln|det a|` with respect to `a`.
pub fn inverse_transpose(a: &Matrix) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { op: "inverse_transpose", rows: a.rows, cols: a.cols });
    }
    Ok(inverse(a)?.transpose())
}

/// Solves `a x = b` for square `a`.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let lu = Lu::factor(a, "solve")?;
    if b.len() != lu.n {
        return Err(LinalgError::DimensionMismatch {
            op: "solve",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.len(),
            right_cols: 1,
        });
    }
    if lu.singular {
        return Err(LinalgError::Singular);
    }
    Ok(lu.solve(b))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { op: "cholesky", rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::Singular);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub alpha: Vec<f64>,
    /// `‖a·alpha − b‖₂`
    pub residual: f64,
    /// False when the iteration cap was hit; `alpha` is then the best iterate.
    pub converged: bool,
}

/// Nonnegative least squares, `min ‖a·x − b‖₂ s.t. x ≥ 0`.
///
/// Lawson–Hanson active set. The outer loop is capped at `10·cols`
/// iterations; `tol` is the dual-feasibility threshold on the gradient.
pub fn nnls(a: &Matrix, b: &[f64], tol: f64) -> Result<NnlsSolution, LinalgError> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(LinalgError::DimensionMismatch {
            op: "nnls",
            left_rows: m,
            left_cols: n,
            right_rows: b.len(),
            right_cols: 1,
        });
    }
    let residual_of = |x: &[f64]| -> f64 {
        let ax = a.mat_vec(x).expect("shape checked");
        ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let max_iter = 10 * n.max(1);
    let mut converged = false;

    for _ in 0..max_iter {
        // w = aᵀ(b − a x), the negative gradient.
        let ax = a.mat_vec(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let w: Vec<f64> = (0..n).map(|j| (0..m).map(|i| a[(i, j)] * r[i]).sum()).collect();
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(enter) = candidate else {
            converged = true;
            break;
        };
        passive[enter] = true;

        loop {
            let set: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let z_set = least_squares_subset(a, b, &set);
            let mut z = vec![0.0; n];
            for (k, &j) in set.iter().enumerate() {
                z[j] = z_set[k];
            }
            if set.iter().all(|&j| z[j] > 0.0) {
                x = z;
                break;
            }
            // Step back toward x until the first passive variable hits zero.
            let mut step = f64::INFINITY;
            for &j in &set {
                if z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        step = step.min(x[j] / denom);
                    } else {
                        step = 0.0;
                    }
                }
            }
            let step = if step.is_finite() { step } else { 0.0 };
            for j in 0..n {
                x[j] += step * (z[j] - x[j]);
            }
            for &j in &set {
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual = residual_of(&x);
    Ok(NnlsSolution { alpha: x, residual, converged })
}

/// Unconstrained least squares restricted to the columns in `set`.
fn least_squares_subset(a: &Matrix, b: &[f64], set: &[usize]) -> Vec<f64> {
    let k = set.len();
    let m = a.rows();
    // Normal equations with a tiny ridge; QR would be more accurate but the
    // passive sets here are small and well separated.
    let mut gram = Matrix::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for (p, &jp) in set.iter().enumerate() {
        for (q, &jq) in set.iter().enumerate() {
            gram[(p, q)] = (0..m).map(|i| a[(i, jp)] * a[(i, jq)]).sum();
        }
        rhs[p] = (0..m).map(|i| a[(i, jp)] * b[i]).sum();
    }
    match solve(&gram, &rhs) {
        Ok(z) if z.iter().all(|v| v.is_finite()) => z,
        _ => {
            let trace: f64 = (0..k).map(|i| gram[(i, i)]).sum::<f64>().max(1.0);
            for i in 0..k {
                gram[(i, i)] += 1e-12 * trace;
            }
            solve(&gram, &rhs).unwrap_or_else(|_| vec![0.0; k])
        }
    }
}
