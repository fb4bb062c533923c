//! Dense row-major matrices and the factorizations used by the initializers
//! and the basis-embedding export: truncated SVD (one-sided Jacobi),
//! multiplicative-update NMF and two-component PCA.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vstack requires equal column counts"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Four interleaved partial sums, which lets the compiler vectorize.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Top-k singular triplets, singular values in descending order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    /// rows × k
    pub left_vectors: Matrix,
    /// cols × k
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// `U diag(s) Vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let rows = self.left_vectors.rows();
        let cols = self.right_vectors.rows();
        let mut out = Matrix::zeros(rows, cols);
        for (j, &s) in self.singular_values.iter().enumerate() {
            for i in 0..rows {
                let us = self.left_vectors[(i, j)] * s;
                if us == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    out[(i, c)] += us * self.right_vectors[(c, j)];
                }
            }
        }
        out
    }
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Truncated SVD by one-sided (Hestenes) Jacobi rotations.
pub fn svd_top_k(m: &Matrix, k: usize) -> Result<SvdResult> {
    let limit = m.rows.min(m.cols);
    if k == 0 || k > limit {
        return Err(Error::Capacity {
            requested: k,
            available: limit,
        });
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("svd input has non-finite entries"));
    }

    // Rotate columns of the tall orientation; a wide matrix is handled
    // through its transpose with the roles of U and V swapped.
    let wide = m.rows < m.cols;
    let a = if wide { m.transpose() } else { m.clone() };
    let (n_rows, n_cols) = (a.rows, a.cols);

    let mut work: Vec<Vec<f64>> = (0..n_cols).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n_cols)
        .map(|j| {
            let mut e = vec![0.0; n_cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n_cols {
            for q in (p + 1)..n_cols {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut work, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(
            "one-sided Jacobi SVD did not converge".into(),
        ));
    }

    let norms: Vec<f64> = work.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n_cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    order.truncate(k);

    let sigma_max = norms[order[0]];
    let null_tol = sigma_max * 1e-13;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut singular_values = Vec::with_capacity(k);
    for &j in &order {
        let s = norms[j];
        singular_values.push(s);
        if s > null_tol && s > 0.0 {
            left.push(work[j].iter().map(|x| x / s).collect());
        } else {
            left.push(orthonormal_complement(&left, n_rows));
        }
    }

    let mut u_mat = Matrix::zeros(n_rows, k);
    let mut v_mat = Matrix::zeros(n_cols, k);
    for (c, &j) in order.iter().enumerate() {
        for i in 0..n_rows {
            u_mat[(i, c)] = left[c][i];
        }
        for i in 0..n_cols {
            v_mat[(i, c)] = v[j][i];
        }
    }

    Ok(if wide {
        SvdResult {
            singular_values,
            left_vectors: v_mat,
            right_vectors: u_mat,
        }
    } else {
        SvdResult {
            singular_values,
            left_vectors: u_mat,
            right_vectors: v_mat,
        }
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn orthonormal_complement(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        // Two Gram-Schmidt passes keep the result orthogonal to rounding level.
        for _ in 0..2 {
            for b in basis {
                let d = dot(&cand, b);
                for (c, bi) in cand.iter_mut().zip(b) {
                    *c -= d * bi;
                }
            }
        }
        let n = dot(&cand, &cand).sqrt();
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, cand));
        }
    }
    let (n, mut cand) = best.expect("dimension is at least one");
    for c in &mut cand {
        *c /= n;
    }
    cand
}

/// Non-negative factors `w · h ≈ m`.
#[derive(Debug, Clone)]
pub struct NmfResult {
    pub w: Matrix,
    pub h: Matrix,
    /// Squared Frobenius reconstruction error after the last update.
    pub final_objective: f64,
    /// Objective before the first update followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
}

pub const NMF_DEFAULT_ITERATIONS: usize = 200;
const NMF_EPS: f64 = 1e-12;

/// Lee–Seung multiplicative updates on the squared Frobenius objective.
pub fn nmf_factorize(m: &Matrix, k: usize, iterations: usize, seed: u64) -> Result<NmfResult> {
    if let Some(v) = m.data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "nmf requires finite non-negative entries, found {v}"
        )));
    }
    let limit = m.rows.min(m.cols);
    if k == 0 || k > limit {
        return Err(Error::Capacity {
            requested: k,
            available: limit,
        });
    }

    let mean = if m.data.is_empty() {
        0.0
    } else {
        m.data.iter().sum::<f64>() / m.data.len() as f64
    };
    let scale = (mean / k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.abs() * scale
            })
            .collect()
    };
    let mut w = Matrix::from_vec(m.rows, k, draw(m.rows * k))?;
    let mut h = Matrix::from_vec(k, m.cols, draw(k * m.cols))?;

    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(nmf_objective(m, &w, &h));
    for _ in 0..iterations {
        // H ← H ⊙ (WᵀV) / (WᵀW H)
        let wt = w.transpose();
        let numer = wt.matmul(m)?;
        let denom = wt.matmul(&w)?.matmul(&h)?;
        for ((hv, n), d) in h.data.iter_mut().zip(&numer.data).zip(&denom.data) {
            *hv *= n / (d + NMF_EPS);
        }
        // W ← W ⊙ (V Hᵀ) / (W H Hᵀ)
        let ht = h.transpose();
        let numer = m.matmul(&ht)?;
        let denom = w.matmul(&h.matmul(&ht)?)?;
        for ((wv, n), d) in w.data.iter_mut().zip(&numer.data).zip(&denom.data) {
            *wv *= n / (d + NMF_EPS);
        }
        trace.push(nmf_objective(m, &w, &h));
    }

    Ok(NmfResult {
        final_objective: *trace.last().expect("trace has the initial entry"),
        objective_trace: trace,
        w,
        h,
    })
}

fn nmf_objective(m: &Matrix, w: &Matrix, h: &Matrix) -> f64 {
    let wh = w.matmul(h).expect("factor shapes agree");
    m.data
        .iter()
        .zip(&wh.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Centers the rows and projects them onto the top two principal axes.
///
/// Each axis is signed so that its largest-magnitude loading is positive.
/// Output columns carry variances `s_j² / (rows − 1)` in descending order.
pub fn pca_project_2d(points: &Matrix) -> Result<Matrix> {
    if points.rows < 2 || points.cols < 2 {
        return Err(Error::invalid(format!(
            "pca needs at least 2 rows and 2 columns, got {}x{}",
            points.rows, points.cols
        )));
    }
    let mut centered = points.clone();
    for j in 0..points.cols {
        let mean = (0..points.rows).map(|i| points[(i, j)]).sum::<f64>() / points.rows as f64;
        for i in 0..points.rows {
            centered[(i, j)] -= mean;
        }
    }
    let svd = svd_top_k(&centered, 2)?;
    let mut axes = svd.right_vectors;
    for c in 0..2 {
        let mut pivot = 0;
        for i in 0..axes.rows() {
            if axes[(i, c)].abs() > axes[(pivot, c)].abs() {
                pivot = i;
            }
        }
        if axes[(pivot, c)] < 0.0 {
            for i in 0..axes.rows() {
                axes[(i, c)] = -axes[(i, c)];
            }
        }
    }
    centered.matmul(&axes)
}
