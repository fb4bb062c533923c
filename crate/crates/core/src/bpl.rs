//! The basis-projected layer.
//!
//! Each data element `x ∈ ℝ^F` is projected onto `N` learnable bases
//! `B_n ∈ ℝ^F`. Before projecting, every basis is clamped into the unit
//! p-norm ball, `B'_n = B_n / max(1, ‖B_n‖_p)`, and the layer emits one
//! coefficient per basis:
//!
//! ```text
//! c_n = (x · B'_n) / ‖B'_n‖_p
//! ```
//!
//! The output is dense whenever no basis is orthogonal to the element, which
//! is how pattern-sparse inputs become dense representations. The stored
//! parameter is the unclamped `B`; gradients flow through the clamp.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, nmf_factorize, svd_top_k, Matrix, NMF_DEFAULT_ITERATIONS};
use crate::rng::seeded;
use crate::tensor::Tensor3;

/// Rows whose norm exceeds one by less than this are left as they are, which
/// makes the clamp idempotent bit-for-bit.
pub const CLAMP_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// What the projection is divided by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `‖B'_n‖_p`: the coefficient depends only on the basis direction.
    #[default]
    Norm,
    /// `‖B'_n‖_p²`
    NormSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    bases: Matrix,
    norm_type: f64,
    epsilon: f64,
    denominator: Denominator,
}

impl BasisSet {
    /// Bases given as an `N × F` matrix, Euclidean norm.
    pub fn new(bases: Matrix) -> Result<Self> {
        if bases.rows() == 0 || bases.cols() == 0 {
            return Err(Error::invalid("a basis set needs at least one basis of dimension ≥ 1"));
        }
        if bases.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("bases must be finite"));
        }
        Ok(BasisSet {
            bases,
            norm_type: 2.0,
            epsilon: DEFAULT_EPSILON,
            denominator: Denominator::Norm,
        })
    }

    pub fn with_norm_type(mut self, p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::invalid(format!("norm type must be ≥ 1, got {p}")));
        }
        self.norm_type = p;
        Ok(self)
    }

    pub fn with_denominator(mut self, denominator: Denominator) -> Self {
        self.denominator = denominator;
        self
    }

    pub fn n_bases(&self) -> usize {
        self.bases.rows()
    }

    pub fn element_dim(&self) -> usize {
        self.bases.cols()
    }

    pub fn bases(&self) -> &Matrix {
        &self.bases
    }

    pub fn bases_mut(&mut self) -> &mut Matrix {
        &mut self.bases
    }

    pub fn norm_type(&self) -> f64 {
        self.norm_type
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn denominator(&self) -> Denominator {
        self.denominator
    }

    pub fn row_norm(&self, n: usize) -> f64 {
        p_norm(self.bases.row(n), self.norm_type)
    }
}

pub fn p_norm(v: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        dot(v, v).sqrt()
    } else if p == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `∂‖v‖_p / ∂v` at a point with norm `norm > 0`.
fn p_norm_gradient(v: &[f64], p: f64, norm: f64) -> Vec<f64> {
    if p == 2.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        let scale = norm.powf(p - 1.0);
        v.iter()
            .map(|x| x.signum() * x.abs().powf(p - 1.0) / scale)
            .collect()
    }
}

fn needs_clamp(norm: f64) -> bool {
    norm > 1.0 + CLAMP_TOLERANCE
}

/// `B'_n = B_n / max(1, ‖B_n‖_p)` for every row.
pub fn clamp_bases(b: &BasisSet) -> BasisSet {
    let mut out = b.clone();
    for n in 0..b.n_bases() {
        let norm = b.row_norm(n);
        if needs_clamp(norm) {
            for v in out.bases.row_mut(n) {
                *v /= norm;
            }
        }
    }
    out
}

/// Coefficients plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ProjectionOutput {
    /// `batch × T × N`
    pub coefficients: Tensor3,
    input: Tensor3,
    raw: Matrix,
    clamped: Matrix,
    raw_norms: Vec<f64>,
    clamped_norms: Vec<f64>,
    /// Effective projection rows `B'_n / D(‖B'_n‖)`; zero for degenerate rows.
    weights: Matrix,
    norm_type: f64,
    epsilon: f64,
    denominator: Denominator,
}

impl ProjectionOutput {
    pub fn clamped_bases(&self) -> &Matrix {
        &self.clamped
    }

    pub fn clamped_norms(&self) -> &[f64] {
        &self.clamped_norms
    }
}

/// Rows `B'_n / D(‖B'_n‖_p)` that map an element to its coefficients.
pub fn projection_weights(b: &BasisSet) -> Matrix {
    let clamped = clamp_bases(b);
    let mut w = clamped.bases.clone();
    for n in 0..b.n_bases() {
        let norm = p_norm(clamped.bases.row(n), b.norm_type);
        let row = w.row_mut(n);
        if norm < b.epsilon {
            row.fill(0.0);
            continue;
        }
        let d = match b.denominator {
            Denominator::Norm => norm,
            Denominator::NormSquared => norm * norm,
        };
        for v in row {
            *v /= d;
        }
    }
    w
}

/// Projects every element of a `batch × T × F` input onto the bases.
pub fn bpl_forward(x: &Tensor3, b: &BasisSet) -> Result<ProjectionOutput> {
    let [batch, t_len, f] = x.shape();
    if f != b.element_dim() {
        return Err(Error::shape(format!(
            "input element dimension {f} does not match basis dimension {}",
            b.element_dim()
        )));
    }
    let clamped = clamp_bases(b);
    let n_bases = b.n_bases();
    let raw_norms: Vec<f64> = (0..n_bases).map(|n| b.row_norm(n)).collect();
    let clamped_norms: Vec<f64> = (0..n_bases).map(|n| clamped.row_norm(n)).collect();
    let weights = projection_weights(b);

    let mut coefficients = Tensor3::zeros([batch, t_len, n_bases]);
    for bi in 0..batch {
        for t in 0..t_len {
            let elem = x.lane(bi, t);
            let out = coefficients.lane_mut(bi, t);
            for (n, c) in out.iter_mut().enumerate() {
                *c = dot(elem, weights.row(n));
            }
        }
    }

    Ok(ProjectionOutput {
        coefficients,
        input: x.clone(),
        raw: b.bases.clone(),
        clamped: clamped.bases,
        raw_norms,
        clamped_norms,
        weights,
        norm_type: b.norm_type,
        epsilon: b.epsilon,
        denominator: b.denominator,
    })
}

/// Gradients with respect to the input and the unclamped bases.
pub fn bpl_backward(grad_y: &Tensor3, cache: &ProjectionOutput) -> Result<(Tensor3, Matrix)> {
    let (grad_x, grad_b) = backward_impl(grad_y, cache, true)?;
    Ok((grad_x.expect("requested"), grad_b))
}

/// Basis gradient only, for when the input needs none.
pub fn bpl_backward_bases(grad_y: &Tensor3, cache: &ProjectionOutput) -> Result<Matrix> {
    Ok(backward_impl(grad_y, cache, false)?.1)
}

fn backward_impl(
    grad_y: &Tensor3,
    cache: &ProjectionOutput,
    input_grad: bool,
) -> Result<(Option<Tensor3>, Matrix)> {
    if grad_y.shape() != cache.coefficients.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match coefficient shape {:?}",
            grad_y.shape(),
            cache.coefficients.shape()
        )));
    }
    let [batch, t_len, n_bases] = grad_y.shape();
    let f = cache.raw.cols();

    let mut grad_x = input_grad.then(|| Tensor3::zeros([batch, t_len, f]));
    let mut grad_w = Matrix::zeros(n_bases, f);
    for bi in 0..batch {
        for t in 0..t_len {
            let g = grad_y.lane(bi, t);
            let elem = cache.input.lane(bi, t);
            let mut gx = grad_x.as_mut().map(|gx| gx.lane_mut(bi, t));
            for (n, &gn) in g.iter().enumerate() {
                if gn == 0.0 {
                    continue;
                }
                if let Some(gx) = gx.as_deref_mut() {
                    for (o, w) in gx.iter_mut().zip(cache.weights.row(n)) {
                        *o += gn * w;
                    }
                }
                for (o, e) in grad_w.row_mut(n).iter_mut().zip(elem) {
                    *o += gn * e;
                }
            }
        }
    }

    let p = cache.norm_type;
    let mut grad_b = Matrix::zeros(n_bases, f);
    for n in 0..n_bases {
        let norm_c = cache.clamped_norms[n];
        if norm_c < cache.epsilon {
            continue;
        }
        let clamped = cache.clamped.row(n);
        let gw = grad_w.row(n);

        // through W = B' / D(ν')
        let (d, d_prime) = match cache.denominator {
            Denominator::Norm => (norm_c, 1.0),
            Denominator::NormSquared => (norm_c * norm_c, 2.0 * norm_c),
        };
        let proj = dot(gw, clamped);
        let dnu = p_norm_gradient(clamped, p, norm_c);
        let grad_clamped: Vec<f64> = gw
            .iter()
            .zip(&dnu)
            .map(|(g, dn)| g / d - proj * d_prime / (d * d) * dn)
            .collect();

        // through B' = B / max(1, ν)
        let raw_norm = cache.raw_norms[n];
        let out = grad_b.row_mut(n);
        if needs_clamp(raw_norm) {
            let raw = cache.raw.row(n);
            let proj = dot(&grad_clamped, raw);
            let dnu = p_norm_gradient(raw, p, raw_norm);
            for ((o, g), dn) in out.iter_mut().zip(&grad_clamped).zip(&dnu) {
                *o = g / raw_norm - proj / (raw_norm * raw_norm) * dn;
            }
        } else {
            out.copy_from_slice(&grad_clamped);
        }
    }
    Ok((grad_x, grad_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    VonMises,
    MultivariateNormal,
    Svd,
    Nmf,
}

impl InitMethod {
    pub const ALL: [InitMethod; 4] = [
        InitMethod::Svd,
        InitMethod::Nmf,
        InitMethod::MultivariateNormal,
        InitMethod::VonMises,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMethod::VonMises => "von_mises",
            InitMethod::MultivariateNormal => "multivariate_normal",
            InitMethod::Svd => "svd",
            InitMethod::Nmf => "nmf",
        }
    }

    pub fn needs_data(self) -> bool {
        matches!(self, InitMethod::Svd | InitMethod::Nmf)
    }
}

pub const DEFAULT_CONCENTRATION: f64 = PI;

#[derive(Debug, Clone)]
pub struct InitSpec {
    pub method: InitMethod,
    pub seed: u64,
    /// von Mises κ.
    pub concentration: f64,
    /// Center direction for von Mises; normalized all-ones when absent.
    pub center: Option<Vec<f64>>,
    /// `elements × F` data for the factorization initializers.
    pub data: Option<Matrix>,
    pub nmf_iterations: usize,
}

impl InitSpec {
    pub fn new(method: InitMethod, seed: u64) -> Self {
        InitSpec {
            method,
            seed,
            concentration: DEFAULT_CONCENTRATION,
            center: None,
            data: None,
            nmf_iterations: NMF_DEFAULT_ITERATIONS,
        }
    }

    pub fn with_data(mut self, data: Matrix) -> Self {
        self.data = Some(data);
        self
    }
}

pub fn init_bases(spec: &InitSpec, n: usize, f: usize) -> Result<BasisSet> {
    match spec.method {
        InitMethod::VonMises => init_von_mises(spec, n, f),
        InitMethod::MultivariateNormal => init_multivariate_normal(spec, n, f),
        InitMethod::Svd | InitMethod::Nmf => init_from_factorization(spec, n, f),
    }
}

fn check_counts(n: usize, f: usize) -> Result<()> {
    if n == 0 || f == 0 {
        return Err(Error::invalid(format!(
            "need at least one basis of dimension ≥ 1, got {n}x{f}"
        )));
    }
    Ok(())
}

fn wrong_method(spec: &InitSpec, expected: &str) -> Error {
    Error::invalid(format!(
        "initializer {expected} called with method {}",
        spec.method.name()
    ))
}

/// Angle sampler for the von Mises distribution with mean 0 (Best & Fisher
/// rejection scheme), returning values in `[-π, π]`.
#[derive(Debug, Clone, Copy)]
pub struct VonMisesAngle {
    kappa: f64,
    r: f64,
}

impl VonMisesAngle {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::invalid(format!(
                "von Mises concentration must be positive, got {kappa}"
            )));
        }
        let a = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
        let b = (a - (2.0 * a).sqrt()) / (2.0 * kappa);
        let r = (1.0 + b * b) / (2.0 * b);
        Ok(VonMisesAngle { kappa, r })
    }
}

impl Distribution<f64> for VonMisesAngle {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let f = loop {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let z = (PI * u1).cos();
            let f = (1.0 + self.r * z) / (self.r + z);
            let c = self.kappa * (self.r - f);
            if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
                break f;
            }
        };
        let theta = f.clamp(-1.0, 1.0).acos();
        if rng.random::<f64>() < 0.5 {
            -theta
        } else {
            theta
        }
    }
}

fn unit_center(spec: &InitSpec, f: usize) -> Result<Vec<f64>> {
    let c = spec
        .center
        .clone()
        .unwrap_or_else(|| vec![1.0; f]);
    if c.len() != f {
        return Err(Error::shape(format!(
            "center has dimension {} but bases have {f}",
            c.len()
        )));
    }
    let norm = dot(&c, &c).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::invalid("center vector must be finite and non-zero"));
    }
    Ok(c.into_iter().map(|v| v / norm).collect())
}

/// Unit bases whose angle to the center follows a von Mises law; the
/// remaining direction is uniform on the orthogonal complement.
pub fn init_von_mises(spec: &InitSpec, n: usize, f: usize) -> Result<BasisSet> {
    if spec.method != InitMethod::VonMises {
        return Err(wrong_method(spec, "von_mises"));
    }
    check_counts(n, f)?;
    if f < 2 {
        return Err(Error::invalid(
            "von Mises initialization needs element dimension ≥ 2",
        ));
    }
    let center = unit_center(spec, f)?;
    let angle = VonMisesAngle::new(spec.concentration)?;
    let mut rng = seeded(spec.seed);

    let mut bases = Matrix::zeros(n, f);
    for row in 0..n {
        let theta = angle.sample(&mut rng).abs();
        let dir = loop {
            let mut z: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
            let along = dot(&z, &center);
            for (zi, ci) in z.iter_mut().zip(&center) {
                *zi -= along * ci;
            }
            let norm = dot(&z, &z).sqrt();
            if norm > 1e-8 {
                break z.into_iter().map(|v| v / norm).collect::<Vec<_>>();
            }
        };
        let (s, c) = theta.sin_cos();
        let out = bases.row_mut(row);
        for ((o, ci), ui) in out.iter_mut().zip(&center).zip(&dir) {
            *o = c * ci + s * ui;
        }
        let norm = dot(out, out).sqrt();
        for o in out.iter_mut() {
            *o /= norm;
        }
    }
    BasisSet::new(bases)
}

/// Entries i.i.d. `N(0, 1/f)`, so rows have unit expected squared norm.
pub fn init_multivariate_normal(spec: &InitSpec, n: usize, f: usize) -> Result<BasisSet> {
    if spec.method != InitMethod::MultivariateNormal {
        return Err(wrong_method(spec, "multivariate_normal"));
    }
    check_counts(n, f)?;
    let normal = Normal::new(0.0, (1.0 / f as f64).sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seeded(spec.seed);
    let values = (0..n * f).map(|_| normal.sample(&mut rng)).collect();
    BasisSet::new(Matrix::from_vec(n, f, values)?)
}

/// Bases from SVD right singular vectors or unit-normalized NMF components
/// of `spec.data`.
pub fn init_from_factorization(spec: &InitSpec, n: usize, f: usize) -> Result<BasisSet> {
    check_counts(n, f)?;
    let data = spec.data.as_ref().ok_or_else(|| {
        Error::invalid(format!(
            "{} initialization requires a data matrix",
            spec.method.name()
        ))
    })?;
    if data.cols() != f {
        return Err(Error::shape(format!(
            "factorization data has {} columns, expected {f}",
            data.cols()
        )));
    }
    let available = data.rows().min(f);
    if n > available {
        return Err(Error::Capacity {
            requested: n,
            available,
        });
    }

    let mut bases = Matrix::zeros(n, f);
    match spec.method {
        InitMethod::Svd => {
            let svd = svd_top_k(data, n)?;
            for row in 0..n {
                let mut v = svd.right_vectors.column(row);
                // singular vectors are sign-ambiguous; point them along the data
                if v.iter().sum::<f64>() < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                bases.row_mut(row).copy_from_slice(&v);
            }
        }
        InitMethod::Nmf => {
            let nmf = nmf_factorize(data, n, spec.nmf_iterations, spec.seed)?;
            for row in 0..n {
                let h = nmf.h.row(row);
                let norm = dot(h, h).sqrt();
                let out = bases.row_mut(row);
                if norm > 0.0 {
                    for (o, v) in out.iter_mut().zip(h) {
                        *o = v / norm;
                    }
                }
            }
        }
        _ => return Err(wrong_method(spec, "svd/nmf")),
    }
    BasisSet::new(bases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(row: &[f64]) -> BasisSet {
        BasisSet::new(Matrix::from_rows(&[row.to_vec()]).unwrap()).unwrap()
    }

    fn elem(x: &[f64]) -> Tensor3 {
        Tensor3::from_vec([1, 1, x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_bases(&single(&[0.3, 0.4])).bases().row(0), &[0.3, 0.4]);
        let c = clamp_bases(&single(&[3.0, 4.0]));
        assert_eq!(c.bases().row(0), &[0.6, 0.8]);
        assert_eq!(c.row_norm(0), 1.0);
        assert_eq!(clamp_bases(&single(&[0.0, 0.0, 0.0])).bases().row(0), &[0.0; 3]);
    }

    #[test]
    fn forward_examples() {
        let y = bpl_forward(&elem(&[3.0, 4.0]), &single(&[1.0, 0.0])).unwrap();
        assert_eq!(y.coefficients.as_slice(), &[3.0]);
        let y = bpl_forward(&elem(&[1.0, 0.0]), &single(&[0.0, 1.0])).unwrap();
        assert_eq!(y.coefficients.as_slice(), &[0.0]);
        let y = bpl_forward(&elem(&[2.0, 0.0]), &single(&[4.0, 0.0])).unwrap();
        assert_eq!(y.coefficients.as_slice(), &[2.0]);
        let y = bpl_forward(&elem(&[2.0, 0.0]), &single(&[0.5, 0.0])).unwrap();
        assert_eq!(y.coefficients.as_slice(), &[2.0]);
    }

    #[test]
    fn norm_squared_denominator() {
        let b = single(&[0.5, 0.0]).with_denominator(Denominator::NormSquared);
        let y = bpl_forward(&elem(&[2.0, 0.0]), &b).unwrap();
        assert_eq!(y.coefficients.as_slice(), &[4.0]);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let err = bpl_forward(&elem(&[1.0, 2.0, 3.0]), &single(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn backward_unit_basis() {
        let out = bpl_forward(&elem(&[3.0, 4.0]), &single(&[1.0, 0.0])).unwrap();
        let g = Tensor3::from_vec([1, 1, 1], vec![1.0]).unwrap();
        let (gx, _) = bpl_backward(&g, &out).unwrap();
        assert_eq!(gx.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_zero_row_has_zero_gradient() {
        let b = BasisSet::new(Matrix::from_rows(&[vec![0.0, 0.0], vec![0.6, 0.8]]).unwrap()).unwrap();
        let out = bpl_forward(&elem(&[3.0, 4.0]), &b).unwrap();
        assert_eq!(out.coefficients.as_slice()[0], 0.0);
        let g = Tensor3::from_vec([1, 1, 2], vec![1.0, 1.0]).unwrap();
        let (_, gb) = bpl_backward(&g, &out).unwrap();
        assert_eq!(gb.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let out = bpl_forward(&elem(&[3.0, 4.0]), &single(&[1.0, 0.0])).unwrap();
        let g = Tensor3::zeros([1, 1, 2]);
        assert!(bpl_backward(&g, &out).is_err());
    }

    #[test]
    fn von_mises_needs_two_dims() {
        let spec = InitSpec::new(InitMethod::VonMises, 0);
        assert!(init_von_mises(&spec, 3, 1).is_err());
    }

    #[test]
    fn von_mises_large_concentration_hugs_center() {
        let mut spec = InitSpec::new(InitMethod::VonMises, 3);
        spec.concentration = 1e6;
        let b = init_von_mises(&spec, 200, 8).unwrap();
        let c = 1.0 / 8f64.sqrt();
        for n in 0..200 {
            let cos = b.bases().row(n).iter().sum::<f64>() * c;
            assert!(cos.clamp(-1.0, 1.0).acos() < 0.01);
        }
    }

    #[test]
    fn factorization_capacity_and_identity() {
        let spec = InitSpec::new(InitMethod::Svd, 0).with_data(Matrix::identity(4));
        let b = init_from_factorization(&spec, 4, 4).unwrap();
        for n in 0..4 {
            let row = b.bases().row(n);
            assert_eq!(row.iter().filter(|v| v.abs() > 1e-12).count(), 1);
            assert!((row.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            init_from_factorization(&spec, 5, 4),
            Err(Error::Capacity { requested: 5, available: 4 })
        ));
        let missing = InitSpec::new(InitMethod::Nmf, 0);
        assert!(init_from_factorization(&missing, 2, 4).is_err());
    }

    #[test]
    fn method_mismatch_is_rejected() {
        let spec = InitSpec::new(InitMethod::Svd, 0);
        assert!(init_von_mises(&spec, 2, 2).is_err());
        assert!(init_multivariate_normal(&spec, 2, 2).is_err());
    }
}
