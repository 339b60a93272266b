//! Small dense linear algebra and scalar helpers shared by the metric and
//! kernel modules, plus the central-difference gradient checker used as an
//! oracle for every analytic gradient in [`crate::loss_kernels`].
//!
//! Natural logarithms are used throughout.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Owned vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        ensure_finite(&data, "vector")?;
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix of finite values.
///
/// Serialized as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        ensure_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v` without materializing the transpose.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

pub(crate) fn ensure_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn ensure_same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_same_dim(a, b)?;
    ensure_finite(a, "cosine input")?;
    ensure_finite(b, "cosine input")?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    ensure_finite(m.data(), "softmax input")?;
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const DISTRIBUTION_TOL: f64 = 1e-9;

pub(crate) fn ensure_distribution(row: &[f64], index: usize, tol: f64) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > tol {
        return Err(Error::NotADistribution { row: index, sum });
    }
    Ok(())
}

/// Shannon entropy of one distribution, `0 ln 0 := 0`.
pub(crate) fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean over rows of the Shannon entropy of each row.
pub fn entropy_rows(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 {
        return Err(Error::invalid("entropy of a matrix with no rows"));
    }
    for i in 0..m.rows() {
        ensure_distribution(m.row(i), i, DISTRIBUTION_TOL)?;
    }
    let total: f64 = (0..m.rows()).map(|i| entropy(m.row(i))).sum();
    Ok(total / m.rows() as f64)
}

pub fn cross_entropy(predicted: &[f64], onehot_label: &[f64]) -> Result<f64> {
    ensure_same_dim(predicted, onehot_label)?;
    ensure_distribution(predicted, 0, DISTRIBUTION_TOL)?;
    let ones = onehot_label.iter().filter(|&&y| y == 1.0).count();
    let zeros = onehot_label.iter().filter(|&&y| y == 0.0).count();
    if ones != 1 || ones + zeros != onehot_label.len() {
        return Err(Error::invalid("label must contain exactly one 1 and zeros elsewhere"));
    }
    let class = onehot_label.iter().position(|&y| y == 1.0).unwrap();
    let p = predicted[class];
    if p == 0.0 {
        return Err(Error::ZeroProbability);
    }
    Ok(-p.ln())
}

/// Options for [`top_eigenvectors`].
#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Stop once `||Av - lambda v||` is below `tol * max|a_ij| * sqrt(dim)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

/// Leading eigenpairs of a symmetric positive semidefinite matrix, by power
/// iteration with Hotelling deflation.
///
/// Pairs come back in descending eigenvalue order. Each vector is unit length
/// and its first component with magnitude above `1e-12` is positive.
pub fn top_eigenvectors(cov: &Matrix, n: usize, opts: EigenOptions) -> Result<Vec<(f64, Vector)>> {
    let dim = cov.rows();
    if cov.cols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "covariance must be square, got {}x{}",
            cov.rows(),
            cov.cols()
        )));
    }
    if n > dim {
        return Err(Error::invalid(format!(
            "requested {n} eigenpairs of a {dim}x{dim} matrix"
        )));
    }
    let scale = cov.data().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if !cov.is_symmetric(1e-12 * scale.max(1.0)) {
        return Err(Error::NotSymmetric);
    }

    let mut deflated = cov.clone();
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n);
    for _ in 0..n {
        let (lambda, v) = power_iterate(&deflated, &found, scale, opts)?;
        // Hotelling deflation: A <- A - lambda v v^T
        for i in 0..dim {
            for j in 0..dim {
                let updated = deflated.get(i, j) - lambda * v[i] * v[j];
                deflated.set(i, j, updated);
            }
        }
        found.push((lambda, v));
    }

    Ok(found
        .into_iter()
        .map(|(lambda, mut v)| {
            apply_sign_convention(&mut v);
            (lambda, Vector(v))
        })
        .collect())
}

fn power_iterate(a: &Matrix, found: &[(f64, Vec<f64>)], scale: f64, opts: EigenOptions) -> Result<(f64, Vec<f64>)> {
    let dim = a.rows();
    let null_floor = 1e-13 * scale.max(f64::MIN_POSITIVE);

    // Residual bound on ||Av - lambda v||; the eigenvector error is this
    // divided by the spectral gap, so it stays small even when the gap is.
    let residual_tol = opts.tol * scale.max(f64::MIN_POSITIVE) * (dim as f64).sqrt();

    let mut v = start_vector(dim, found);
    for _ in 0..opts.max_iter {
        let mut w = a.matvec(&v)?;
        orthogonalize(&mut w, found);
        let w_norm = norm(&w);
        if w_norm <= null_floor {
            // Remaining spectrum is numerically zero; any unit vector in the
            // orthogonal complement is an eigenvector.
            return Ok((0.0, v));
        }
        let lambda = dot(&v, &w);
        let residual = w
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - lambda * y).powi(2))
            .sum::<f64>()
            .sqrt();
        w.iter_mut().for_each(|x| *x /= w_norm);
        if residual <= residual_tol {
            return Ok((rayleigh(a, &w).max(0.0), w));
        }
        v = w;
    }
    Err(Error::NoConvergence(opts.max_iter))
}

fn rayleigh(a: &Matrix, v: &[f64]) -> f64 {
    let av = a.matvec(v).expect("square matrix");
    dot(v, &av)
}

fn orthogonalize(w: &mut [f64], found: &[(f64, Vec<f64>)]) {
    // Two passes of Gram-Schmidt keep the basis orthogonal to ~1e-16.
    for _ in 0..2 {
        for (_, u) in found {
            let c = dot(w, u);
            axpy(-c, u, w);
        }
    }
}

fn start_vector(dim: usize, found: &[(f64, Vec<f64>)]) -> Vec<f64> {
    // Deterministic, with distinct irrational-looking components so it is
    // unlikely to be orthogonal to any structured eigenvector.
    let mut v: Vec<f64> = (0..dim)
        .map(|i| 1.0 / ((i as f64) + std::f64::consts::E).sqrt())
        .collect();
    orthogonalize(&mut v, found);
    let mut nv = norm(&v);
    if nv < 1e-8 {
        // Fall back to the first standard basis vector that survives.
        for k in 0..dim {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            orthogonalize(&mut e, found);
            let ne = norm(&e);
            if ne > 0.5 {
                v = e;
                nv = ne;
                break;
            }
        }
    }
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

fn apply_sign_convention(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Default relative step for [`finite_diff_grad`].
pub const DEFAULT_STEP_SCALE: f64 = 1e-6;

/// Central-difference gradient of `f` at `x` with per-coordinate step
/// `step_scale * max(1, |x_i|)`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], step_scale: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step_scale > 0.0) {
        return Err(Error::invalid("step_scale must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step_scale * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if up.is_nan() || down.is_nan() {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
