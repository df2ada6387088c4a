//! Dense f64 matrices, cosine similarity, AdamW and finite-difference
//! gradient checking.
//!
//! The engine is deliberately small: the HIG architecture is fixed, so the
//! backward pass is written by hand over a handful of primitives (matmul,
//! add, rectify, sigmoid and the focal-loss reduction) rather than recorded
//! on a general tape. [`gradient_check`] is the safety net for that.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix shape {rows}x{cols} does not match {len} values")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("degenerate vector: cosine similarity undefined for zero norm")]
    DegenerateVector,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix. Column vectors are `n x 1` matrices, but most
/// vector math in the crate works on plain `&[f64]` slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = NumericsError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.values)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            values: m.values,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(NumericsError::Shape {
                rows,
                cols,
                len: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(format!("{rows}x{cols} matrix")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::Shape {
                rows: r,
                cols: c,
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(r, c, rows.concat())
    }

    /// `n x 1` column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// Builds a matrix from a generator, used for seeded initialisation.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.values[r * cols + c] = f(r, c);
            }
        }
        m
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NumericsError::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector given as a slice.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(NumericsError::Dimension {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`, the backward companion of [`Matrix::matvec`].
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.rows != y.len() {
            return Err(NumericsError::Dimension {
                op: "transpose_matvec",
                left: (self.cols, self.rows),
                right: (y.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`, the weight-gradient update of a matvec.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(NumericsError::Dimension {
                op: "add_outer",
                left: self.shape(),
                right: (a.len(), b.len()),
            });
        }
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (o, bc) in row.iter_mut().zip(b) {
                *o += scale * ar * bc;
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(NumericsError::Dimension {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    /// Adds `v` to every row's entries, treating `v` as a column (`rows x 1`).
    pub fn add_column_in_place(&mut self, v: &[f64]) -> Result<()> {
        if self.cols != 1 || v.len() != self.rows {
            return Err(NumericsError::Dimension {
                op: "add_column",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        for (o, x) in self.values.iter_mut().zip(v) {
            *o += x;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NumericsError::Dimension {
            op: "cosine_similarity",
            left: (u.len(), 1),
            right: (v.len(), 1),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::DegenerateVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Trainable matrix with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Matrix,
    #[serde(skip)]
    grad: Option<Matrix>,
    #[serde(default)]
    pub frozen: bool,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        Self {
            value,
            grad: None,
            frozen: false,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Gradient buffer, allocated lazily with the value's shape.
    pub fn grad_mut(&mut self) -> &mut Matrix {
        let (r, c) = self.value.shape();
        self.grad.get_or_insert_with(|| Matrix::zeros(r, c))
    }

    pub fn grad(&self) -> Matrix {
        self.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub step: u64,
    pub first: Matrix,
    pub second: Matrix,
}

/// Optimizer state, index-aligned with the parameter list it was built for.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub slots: Vec<Option<Moments>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One adaptive-moment step with decoupled weight decay. Frozen
    /// parameters are skipped entirely, moments included, so their values
    /// stay bit-identical.
    pub fn step(&self, params: &mut [&mut Parameter], state: &mut AdamState) {
        if state.slots.len() < params.len() {
            state.slots.resize(params.len(), None);
        }
        for (param, slot) in params.iter_mut().zip(state.slots.iter_mut()) {
            if param.frozen {
                continue;
            }
            let grad = param.grad();
            let (r, c) = param.shape();
            let moments = slot.get_or_insert_with(|| Moments {
                step: 0,
                first: Matrix::zeros(r, c),
                second: Matrix::zeros(r, c),
            });
            moments.step += 1;
            let t = moments.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let lr = self.learning_rate;
            let values = param.value.values_mut();
            let first = moments.first.values_mut();
            let second = moments.second.values_mut();
            for i in 0..values.len() {
                let g = grad.values[i];
                first[i] = self.beta1 * first[i] + (1.0 - self.beta1) * g;
                second[i] = self.beta2 * second[i] + (1.0 - self.beta2) * g * g;
                let m_hat = first[i] / bc1;
                let v_hat = second[i] / bc2;
                values[i] -= lr * self.weight_decay * values[i];
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Compares analytic gradients against central finite differences.
///
/// Returns the maximum over all entries of
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn gradient_check<F>(params: &[Matrix], analytic: &[Matrix], eps: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    if params.len() != analytic.len() {
        return Err(NumericsError::Dimension {
            op: "gradient_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(NumericsError::Dimension {
                op: "gradient_check",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(NumericsError::NonFinite("loss".into()));
    }

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].values[ei];
            work[pi].values[ei] = orig + eps;
            let plus = loss(&work)?;
            work[pi].values[ei] = orig - eps;
            let minus = loss(&work)?;
            work[pi].values[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFinite("perturbed loss".into()));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[pi].values[ei];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    Ok(worst)
}
