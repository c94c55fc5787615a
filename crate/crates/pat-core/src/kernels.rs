//! Dense vector/matrix primitives shared by every other module.
//!
//! Everything here is 64-bit and hand-written: the backward passes elsewhere
//! are literal formulas, and verifying them against finite differences needs
//! full control over the arithmetic. All functions are pure.

use crate::error::{PatError, Result};

/// Norm floor below which a vector is considered degenerate for cosine geometry.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in &rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            y[r] = dot(self.row(r), x);
        }
        y
    }

    /// `y = M^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            let row = self.row(r);
            for c in 0..self.cols {
                y[c] += row[c] * xr;
            }
        }
        y
    }

    /// `M += s * u v^T`.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let su = s * u[r];
            let row = self.row_mut(r);
            for c in 0..v.len() {
                row[c] += su * v[c];
            }
        }
    }

    /// `M += s * other`, elementwise.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`.
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

fn check_pair(a: &[f64], b: &[f64], context: &'static str) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(PatError::ShapeMismatch {
            context,
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    for (name, n) in [(context, na), (context, nb)] {
        if n <= NORM_EPS {
            return Err(PatError::DegenerateVector {
                context: name,
                norm: n,
                floor: NORM_EPS,
            });
        }
    }
    Ok((na, nb))
}

/// Cosine similarity `a.b / (|a||b|)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_pair(a, b, "cosine_sim")?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Partial derivative of `cosine_sim(x, c)` with respect to `x`:
/// `c / (|c||x|) - (c.x / (|c||x|^3)) x`. The result is orthogonal to `x`.
pub fn cosine_sim_grad_x(x: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let (nx, nc) = check_pair(x, c, "cosine_sim_grad_x")?;
    let cx = dot(c, x);
    let inv = 1.0 / (nc * nx);
    let coef = cx / (nc * nx * nx * nx);
    Ok(x.iter()
        .zip(c)
        .map(|(xi, ci)| ci * inv - coef * xi)
        .collect())
}

/// Partial derivative of `cosine_sim(x, c)` with respect to `c`; the mirror
/// of [`cosine_sim_grad_x`] with the roles of the two vectors swapped.
pub fn cosine_sim_grad_c(x: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    cosine_sim_grad_x(c, x)
}

/// Numerically stable softmax (max-subtracted). Output is positive and sums to 1.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty());
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Pre-activation `W x + b`.
pub fn affine_preact(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols() {
        return Err(PatError::ShapeMismatch {
            context: "affine input",
            expected: w.cols(),
            got: x.len(),
        });
    }
    if b.len() != w.rows() {
        return Err(PatError::ShapeMismatch {
            context: "affine bias",
            expected: w.rows(),
            got: b.len(),
        });
    }
    let mut z = w.matvec(x);
    axpy(&mut z, 1.0, b);
    Ok(z)
}

/// Rectified affine layer: `max(0, W x + b)`.
pub fn affine_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Ok(relu(&affine_preact(w, b, x)?))
}

/// Exact partials of the rectified affine layer.
///
/// `upstream` is the gradient with respect to the layer output; `preact` must
/// be the `W x + b` computed in the forward pass. Returns
/// `(grad_w, grad_b, grad_x)`. The rectifier derivative at exactly zero is
/// taken as zero.
pub fn affine_backward(
    w: &Matrix,
    x: &[f64],
    preact: &[f64],
    upstream: &[f64],
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if upstream.len() != w.rows() || preact.len() != w.rows() {
        return Err(PatError::ShapeMismatch {
            context: "affine upstream",
            expected: w.rows(),
            got: upstream.len(),
        });
    }
    if x.len() != w.cols() {
        return Err(PatError::ShapeMismatch {
            context: "affine input",
            expected: w.cols(),
            got: x.len(),
        });
    }
    let delta: Vec<f64> = upstream
        .iter()
        .zip(preact)
        .map(|(&u, &z)| if z > 0.0 { u } else { 0.0 })
        .collect();
    let mut grad_w = Matrix::zeros(w.rows(), w.cols());
    grad_w.add_outer(1.0, &delta, x);
    let grad_x = w.matvec_t(&delta);
    Ok((grad_w, delta, grad_x))
}
