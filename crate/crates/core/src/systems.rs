//! Stochastic dynamical systems `(X, A)`: `dx = X(x)∘dB + A(x)dt`.
//!
//! Coefficients are supplied through the [`Dynamics`] trait, which writes
//! into caller-owned buffers so the integrators can run allocation-free.
//! Jacobians are analytic when the implementation provides them and fall back
//! to central differences (relative step 1e-5) otherwise.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::expr::{self, Expr};
use crate::geometry::{dot, norm, Embedding, EmbeddingKind, ManifoldModel, FD_REL_STEP};

/// Coefficient fields of an SDE in ambient coordinates.
///
/// Diffusion columns are laid out contiguously: column `i` (the vector field
/// `X^i = X(·)e_i`) occupies `out[i*dim .. (i+1)*dim]`.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn diffusion(&self, x: &[f64], out: &mut [f64]);
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// `DX^i(x)v` for every `i`, same layout as [`Dynamics::diffusion`].
    /// Returns `false` when no analytic form exists.
    fn diffusion_jacobian(&self, _x: &[f64], _v: &[f64], _out: &mut [f64]) -> bool {
        false
    }
    /// `DA(x)v`; `false` when no analytic form exists.
    fn drift_jacobian(&self, _x: &[f64], _v: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calculus {
    Stratonovich,
    Ito,
}

/// A vector field with optional analytic jacobian, used for drifts `Z`.
#[derive(Clone)]
pub struct DriftField {
    pub f: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub jacobian: Option<Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>>,
}

#[derive(Clone)]
pub struct VectorFieldSystem {
    name: String,
    fields: Arc<dyn Dynamics>,
    calculus: Calculus,
    model: ManifoldModel,
    drift_sign: f64,
    allow_fd: bool,
    gradient_of: Option<Arc<Embedding>>,
    /// Itô form this system was converted from, kept for its analytic drift jacobian.
    ito_form: Option<Box<VectorFieldSystem>>,
    /// Stratonovich form this system was converted from (exact round trips).
    strat_form: Option<Box<VectorFieldSystem>>,
}

impl fmt::Debug for VectorFieldSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorFieldSystem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("noise_dim", &self.noise_dim())
            .field("calculus", &self.calculus)
            .field("model", &self.model)
            .field("drift_sign", &self.drift_sign)
            .finish()
    }
}

impl VectorFieldSystem {
    pub fn new(
        name: impl Into<String>,
        fields: Arc<dyn Dynamics>,
        calculus: Calculus,
        model: ManifoldModel,
    ) -> Result<Self> {
        if fields.dim() != model.ambient_dim() {
            return Err(FlowError::Contract(format!(
                "system dimension {} does not match model dimension {}",
                fields.dim(),
                model.ambient_dim()
            )));
        }
        Ok(VectorFieldSystem {
            name: name.into(),
            fields,
            calculus,
            model,
            drift_sign: 1.0,
            allow_fd: true,
            gradient_of: None,
            ito_form: None,
            strat_form: None,
        })
    }

    /// Disables the finite-difference fallback; missing analytic jacobians
    /// then surface as capability errors.
    pub fn without_fd(mut self) -> Self {
        self.allow_fd = false;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.fields.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.fields.noise_dim()
    }

    pub fn calculus(&self) -> Calculus {
        self.calculus
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.model
    }

    pub fn with_model(mut self, model: ManifoldModel) -> Result<Self> {
        if model.ambient_dim() != self.dim() {
            return Err(FlowError::Contract("model dimension mismatch".into()));
        }
        self.model = model;
        Ok(self)
    }

    /// The embedding this system is the gradient Brownian system of, if any.
    pub fn gradient_embedding(&self) -> Option<&Arc<Embedding>> {
        self.gradient_of.as_ref()
    }

    pub fn require_stratonovich(&self) -> Result<()> {
        match self.calculus {
            Calculus::Stratonovich => Ok(()),
            Calculus::Ito => Err(FlowError::Contract(
                "operation needs the Stratonovich representation; convert first".into(),
            )),
        }
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        self.fields.diffusion(x, out);
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.fields.drift(x, out);
        if self.drift_sign != 1.0 {
            out.iter_mut().for_each(|a| *a *= self.drift_sign);
        }
    }

    /// `X(x)e` for a noise vector `e`.
    pub fn apply_diffusion(&self, x: &[f64], e: &[f64]) -> DVector<f64> {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut cols = vec![0.0; d * m];
        self.diffusion(x, &mut cols);
        let mut out = DVector::zeros(d);
        for i in 0..m {
            for k in 0..d {
                out[k] += cols[i * d + k] * e[i];
            }
        }
        out
    }

    pub fn diffusion_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut cols = vec![0.0; d * m];
        self.diffusion(x, &mut cols);
        DMatrix::from_column_slice(d, m, &cols)
    }

    pub fn drift_vec(&self, x: &[f64]) -> DVector<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift(x, &mut out);
        DVector::from_vec(out)
    }

    pub fn has_diffusion_jacobian(&self) -> bool {
        if self.allow_fd {
            return true;
        }
        let d = self.dim();
        let mut out = vec![0.0; d * self.noise_dim()];
        self.fields.diffusion_jacobian(&vec![0.0; d], &vec![0.0; d], &mut out)
    }

    pub fn has_drift_jacobian(&self) -> bool {
        if self.allow_fd {
            return true;
        }
        let d = self.dim();
        let mut out = vec![0.0; d];
        self.fields.drift_jacobian(&vec![0.0; d], &vec![0.0; d], &mut out)
    }

    pub fn require_jacobians(&self) -> Result<()> {
        if !self.has_diffusion_jacobian() {
            return Err(FlowError::Capability(format!("{}: no diffusion jacobian", self.name)));
        }
        if !self.has_drift_jacobian() {
            return Err(FlowError::Capability(format!("{}: no drift jacobian", self.name)));
        }
        Ok(())
    }

    /// `DX^i(x)v` in ambient coordinates (column layout as `diffusion`).
    pub fn diffusion_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        if self.fields.diffusion_jacobian(x, v, out) {
            return;
        }
        let (d, m) = (self.dim(), self.noise_dim());
        let mut plus = vec![0.0; d * m];
        let mut minus = vec![0.0; d * m];
        let vn = norm(v);
        if vn == 0.0 {
            out.iter_mut().for_each(|a| *a = 0.0);
            return;
        }
        let h = FD_REL_STEP * norm(x).max(1.0);
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b / vn).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b / vn).collect();
        self.fields.diffusion(&xp, &mut plus);
        self.fields.diffusion(&xm, &mut minus);
        let scale = vn / (2.0 * h);
        for ((o, p), q) in out.iter_mut().zip(&plus).zip(&minus) {
            *o = (p - q) * scale;
        }
    }

    /// `DA(x)v` in ambient coordinates.
    pub fn drift_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        if self.fields.drift_jacobian(x, v, out) {
            if self.drift_sign != 1.0 {
                out.iter_mut().for_each(|a| *a *= self.drift_sign);
            }
            return;
        }
        fd_directional(|y, o| self.drift(y, o), x, v, out);
    }

    /// Ambient `DX(x)` as a list of `dim × dim` jacobian matrices, one per noise component.
    pub fn diffusion_jacobian_matrices(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut mats = vec![DMatrix::zeros(d, d); m];
        let mut e = vec![0.0; d];
        let mut out = vec![0.0; d * m];
        for j in 0..d {
            e[j] = 1.0;
            self.diffusion_jacobian(x, &e, &mut out);
            for (i, mat) in mats.iter_mut().enumerate() {
                for k in 0..d {
                    mat[(k, j)] = out[i * d + k];
                }
            }
            e[j] = 0.0;
        }
        mats
    }

    /// Covariant derivatives `∇X^i(v)`, one vector per noise component.
    pub fn covariant_diffusion_derivative(&self, x: &[f64], v: &[f64]) -> Result<Vec<DVector<f64>>> {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut out = vec![0.0; d * m];
        self.diffusion_jacobian(x, v, &mut out);
        let p = self.model.projection_matrix(x)?;
        Ok((0..m).map(|i| &p * DVector::from_column_slice(&out[i * d..(i + 1) * d])).collect())
    }

    /// `½ Σ ∇X^i(X^i)`, projected to the tangent space on embedded models.
    pub fn drift_correction(&self, x: &[f64]) -> Result<DVector<f64>> {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut cols = vec![0.0; d * m];
        self.diffusion(x, &mut cols);
        let mut jac = vec![0.0; d * m];
        let mut acc = DVector::zeros(d);
        for i in 0..m {
            self.diffusion_jacobian(x, &cols[i * d..(i + 1) * d], &mut jac);
            for k in 0..d {
                acc[k] += 0.5 * jac[i * d + k];
            }
        }
        if self.model.embedding().is_some() {
            acc = self.model.projection_matrix(x)? * acc;
        }
        Ok(acc)
    }

    /// Generator drift `A^X = A + ½ Σ ∇X^i(X^i)` (tangent part on embedded models).
    pub fn effective_drift_at(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.require_stratonovich()?;
        if self.gradient_of.is_some() {
            // Σ ∇X^i(X^i) vanishes for gradient systems.
            return Ok(self.drift_vec(x));
        }
        let mut a = self.drift_vec(x);
        if self.model.embedding().is_some() {
            a = self.model.projection_matrix(x)? * a;
        }
        Ok(a + self.drift_correction(x)?)
    }

    /// Covariant derivative `∇A^X(x)(v)`.
    pub fn effective_drift_jacobian(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        self.require_stratonovich()?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        if let Some(ito) = &self.ito_form {
            if self.model.is_flat() && ito.fields.drift_jacobian(x, v, &mut out) {
                out.iter_mut().for_each(|a| *a *= ito.drift_sign);
                return Ok(DVector::from_vec(out));
            }
        }
        if self.gradient_of.is_some() {
            self.drift_jacobian(x, v, &mut out);
            return Ok(self.model.projection_matrix(x)? * DVector::from_vec(out));
        }
        let eval = |y: &[f64], o: &mut [f64]| match self.effective_drift_unchecked(y) {
            Ok(a) => o.copy_from_slice(a.as_slice()),
            Err(_) => o.iter_mut().for_each(|a| *a = f64::NAN),
        };
        fd_directional(eval, x, v, &mut out);
        let w = DVector::from_vec(out);
        if self.model.embedding().is_some() {
            Ok(self.model.projection_matrix(x)? * w)
        } else {
            Ok(w)
        }
    }

    fn effective_drift_unchecked(&self, y: &[f64]) -> Result<DVector<f64>> {
        // Off-manifold evaluation for differencing: skip admissibility checks.
        let mut a = self.drift_vec(y);
        let (d, m) = (self.dim(), self.noise_dim());
        let mut cols = vec![0.0; d * m];
        self.diffusion(y, &mut cols);
        let mut jac = vec![0.0; d * m];
        for i in 0..m {
            self.diffusion_jacobian(y, &cols[i * d..(i + 1) * d], &mut jac);
            for k in 0..d {
                a[k] += 0.5 * jac[i * d + k];
            }
        }
        if let Some(e) = self.model.embedding() {
            a = e.tangent_projection(y)? * a;
        }
        Ok(a)
    }

    /// Whether `X(x)X(x)^* v = v` for tangent `v` and `X(x)` maps into `T_xM`
    /// (Brownian motion with drift), to `tol`.
    pub fn is_isometric_at(&self, x: &[f64], tol: f64) -> Result<bool> {
        let xm = self.diffusion_matrix(x);
        let p = self.model.projection_matrix(x)?;
        let xxt = &xm * xm.transpose();
        Ok((xxt - p).amax() <= tol)
    }
}

fn fd_directional(f: impl Fn(&[f64], &mut [f64]), x: &[f64], v: &[f64], out: &mut [f64]) {
    let d = x.len();
    let vn = norm(v);
    if vn == 0.0 {
        out.iter_mut().for_each(|a| *a = 0.0);
        return;
    }
    let h = FD_REL_STEP * norm(x).max(1.0);
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b / vn).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b / vn).collect();
    let mut p = vec![0.0; d];
    let mut m = vec![0.0; d];
    f(&xp, &mut p);
    f(&xm, &mut m);
    let scale = vn / (2.0 * h);
    for k in 0..d {
        out[k] = (p[k] - m[k]) * scale;
    }
}

/// `A^X` split into its two parts.
#[derive(Clone, Debug)]
pub struct DriftDecomposition {
    system: VectorFieldSystem,
}

impl DriftDecomposition {
    pub fn correction(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.system.drift_correction(x)
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        self.system.drift_vec(x)
    }

    pub fn a_x(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.system.effective_drift_at(x)
    }
}

pub fn effective_drift(system: &VectorFieldSystem) -> Result<DriftDecomposition> {
    system.require_stratonovich()?;
    if !system.has_diffusion_jacobian() {
        return Err(FlowError::Capability("effective drift needs the diffusion jacobian".into()));
    }
    Ok(DriftDecomposition { system: system.clone() })
}

struct CorrectedDrift {
    base: VectorFieldSystem,
    /// +½ for Stratonovich → Itô, −½ for Itô → Stratonovich.
    factor: f64,
}

impl Dynamics for CorrectedDrift {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn noise_dim(&self) -> usize {
        self.base.noise_dim()
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        self.base.diffusion(x, out)
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        self.base.drift(x, out);
        let mut cols = vec![0.0; d * m];
        self.base.diffusion(x, &mut cols);
        let mut jac = vec![0.0; d * m];
        for i in 0..m {
            self.base.diffusion_jacobian(x, &cols[i * d..(i + 1) * d], &mut jac);
            for k in 0..d {
                out[k] += self.factor * jac[i * d + k];
            }
        }
    }
    fn diffusion_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        self.base.diffusion_jacobian(x, v, out);
        true
    }
}

/// Rewrites the system in the other calculus: Itô drift
/// `A_ito = A_strat + ½ Σ DX^i(X^i)`. The diffusion is unchanged.
pub fn convert_calculus(system: &VectorFieldSystem, target: Calculus) -> Result<VectorFieldSystem> {
    if system.calculus == target {
        return Ok(system.clone());
    }
    if let (Calculus::Stratonovich, Some(orig)) = (target, &system.strat_form) { return Ok((**orig).clone()) }
    if !system.has_diffusion_jacobian() {
        return Err(FlowError::Capability("calculus conversion needs the diffusion jacobian".into()));
    }
    let factor = match target {
        Calculus::Ito => 0.5,
        Calculus::Stratonovich => -0.5,
    };
    let fields = Arc::new(CorrectedDrift { base: system.clone(), factor });
    let mut out = VectorFieldSystem::new(system.name.clone(), fields, target, system.model.clone())?;
    out.allow_fd = system.allow_fd;
    match target {
        Calculus::Ito => out.strat_form = Some(Box::new(system.clone())),
        Calculus::Stratonovich => out.ito_form = Some(Box::new(system.clone())),
    }
    Ok(out)
}

/// The system with negated drift, `dy = X(y)∘dB − A(y)dt`.
pub fn adjoint(system: &VectorFieldSystem) -> Result<VectorFieldSystem> {
    system.require_stratonovich()?;
    let mut out = system.clone();
    out.drift_sign = -system.drift_sign;
    out.ito_form = None;
    out.strat_form = None;
    Ok(out)
}

/// `dx = Σ e_i dB^i`: translation by Brownian motion.
pub struct Translation {
    pub dim: usize,
}

impl Dynamics for Translation {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.dim
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = 1.0;
        }
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|a| *a = 0.0);
    }
    fn diffusion_jacobian(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|a| *a = 0.0);
        true
    }
    fn drift_jacobian(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|a| *a = 0.0);
        true
    }
}

/// `dx = σ dB + M x dt` with identity noise scaled by `sigma`.
pub struct Linear {
    pub matrix: DMatrix<f64>,
    pub sigma: f64,
}

impl Dynamics for Linear {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn noise_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..n {
            out[i * n + i] = self.sigma;
        }
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..n {
                s += self.matrix[(r, c)] * x[c];
            }
            out[r] = s;
        }
    }
    fn diffusion_jacobian(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|a| *a = 0.0);
        true
    }
    fn drift_jacobian(&self, _x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        self.drift(v, out);
        true
    }
}

/// Coefficients given as parsed expressions, differentiated symbolically.
pub struct ExprDynamics {
    dim: usize,
    noise_dim: usize,
    drift: Vec<Expr>,
    /// `diffusion[i][k]`: component `k` of `X^i`.
    diffusion: Vec<Vec<Expr>>,
    d_drift: Vec<Vec<Expr>>,
    d_diffusion: Vec<Vec<Vec<Expr>>>,
}

impl ExprDynamics {
    /// `drift[k]` is component `k` of `A`; `diffusion[k][i]` is row `k`,
    /// column `i` of the matrix `X(x)`.
    pub fn parse(drift: &[String], diffusion: &[Vec<String>]) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 {
            return Err(FlowError::Config("drift must have at least one component".into()));
        }
        if diffusion.len() != dim {
            return Err(FlowError::Config(format!(
                "diffusion has {} rows, expected {dim}",
                diffusion.len()
            )));
        }
        let noise_dim = diffusion[0].len();
        if noise_dim == 0 || diffusion.iter().any(|r| r.len() != noise_dim) {
            return Err(FlowError::Config("diffusion rows must share a positive length".into()));
        }
        let drift: Vec<Expr> = drift.iter().map(|s| expr::parse(s, dim)).collect::<Result<_>>()?;
        let mut cols = vec![Vec::with_capacity(dim); noise_dim];
        for row in diffusion {
            for (i, s) in row.iter().enumerate() {
                cols[i].push(expr::parse(s, dim)?);
            }
        }
        let d_drift = drift.iter().map(|e| (0..dim).map(|j| e.derivative(j)).collect()).collect();
        let d_diffusion = cols
            .iter()
            .map(|col: &Vec<Expr>| col.iter().map(|e| (0..dim).map(|j| e.derivative(j)).collect()).collect())
            .collect();
        Ok(ExprDynamics { dim, noise_dim, drift, diffusion: cols, d_drift, d_diffusion })
    }
}

impl Dynamics for ExprDynamics {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        for (i, col) in self.diffusion.iter().enumerate() {
            for (k, e) in col.iter().enumerate() {
                out[i * self.dim + k] = e.eval(x);
            }
        }
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (k, e) in self.drift.iter().enumerate() {
            out[k] = e.eval(x);
        }
    }
    fn diffusion_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        for (i, col) in self.d_diffusion.iter().enumerate() {
            for (k, grads) in col.iter().enumerate() {
                out[i * self.dim + k] = grads.iter().zip(v).map(|(g, vj)| g.eval(x) * vj).sum();
            }
        }
        true
    }
    fn drift_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        for (k, grads) in self.d_drift.iter().enumerate() {
            out[k] = grads.iter().zip(v).map(|(g, vj)| g.eval(x) * vj).sum();
        }
        true
    }
}

/// `X(x)e = P(x)e`, the gradient of `x ↦ ⟨x, e⟩` restricted to the embedded
/// manifold, plus an optional tangent drift `Z`.
pub struct GradientDynamics {
    embedding: Arc<Embedding>,
    drift: Option<DriftField>,
}

impl GradientDynamics {
    fn sphere_projection(y: &[f64], out: &mut [f64]) {
        let m = y.len();
        let r2 = dot(y, y);
        for i in 0..m {
            for k in 0..m {
                out[i * m + k] = if i == k { 1.0 } else { 0.0 } - y[i] * y[k] / r2;
            }
        }
    }

    fn sphere_projection_derivative(y: &[f64], v: &[f64], out: &mut [f64]) {
        let m = y.len();
        let r2 = dot(y, y);
        let yv = dot(y, v);
        for i in 0..m {
            for k in 0..m {
                out[i * m + k] = -(v[k] * y[i] + y[k] * v[i]) / r2 + 2.0 * yv * y[k] * y[i] / (r2 * r2);
            }
        }
    }
}

impl Dynamics for GradientDynamics {
    fn dim(&self) -> usize {
        self.embedding.ambient_dim()
    }
    fn noise_dim(&self) -> usize {
        self.embedding.ambient_dim()
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        if self.embedding.kind() == EmbeddingKind::Sphere {
            Self::sphere_projection(x, out);
            return;
        }
        match self.embedding.tangent_projection(x) {
            // symmetric, so column-major storage equals the column layout
            Ok(p) => out.copy_from_slice(p.as_slice()),
            Err(_) => out.iter_mut().for_each(|a| *a = f64::NAN),
        }
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(z) => (z.f)(x, out),
            None => out.iter_mut().for_each(|a| *a = 0.0),
        }
    }
    fn diffusion_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        if self.embedding.kind() == EmbeddingKind::Sphere {
            Self::sphere_projection_derivative(x, v, out);
            return true;
        }
        if !self.embedding.has_analytic_hessian() {
            return false;
        }
        match self.embedding.projection_derivative(x, v) {
            Ok(dp) => out.copy_from_slice(dp.as_slice()),
            Err(_) => out.iter_mut().for_each(|a| *a = f64::NAN),
        }
        true
    }
    fn drift_jacobian(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
        match &self.drift {
            None => {
                out.iter_mut().for_each(|a| *a = 0.0);
                true
            }
            Some(DriftField { jacobian: Some(j), .. }) => {
                j(x, v, out);
                true
            }
            Some(_) => false,
        }
    }
}

/// Deterministic sample points on an embedding, used for contract checks.
pub(crate) fn embedding_samples(e: &Embedding, count: usize) -> Vec<Vec<f64>> {
    let m = e.ambient_dim();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut x: Vec<f64> = (0..m)
            .map(|j| {
                let t = (k as f64 + 1.0) * (0.618_033_988_749_895 + 0.414_213_562_373_095 * j as f64);
                2.0 * (t.fract() - 0.5)
            })
            .collect();
        if norm(&x) < 1e-3 {
            x[0] += 0.5;
        }
        if e.retract(&mut x).is_ok() && x.iter().all(|a| a.is_finite()) {
            out.push(x);
        }
    }
    out
}

/// Builds the gradient Brownian system of an embedded model:
/// `X(x)e = P(x)e`, `∇X^i(v) = A_x(v, Y(x)e_i)`, with drift `Z`.
pub fn gradient_brownian_from_embedding(
    model: &ManifoldModel,
    drift: Option<DriftField>,
) -> Result<VectorFieldSystem> {
    let e = model
        .embedding()
        .ok_or_else(|| FlowError::Capability("gradient systems need an embedded model".into()))?
        .clone();
    if let Some(z) = &drift {
        let mut zx = vec![0.0; e.ambient_dim()];
        for x in embedding_samples(&e, 16) {
            (z.f)(&x, &mut zx);
            if !model.is_tangent(&x, &zx)? {
                return Err(FlowError::Contract(format!("drift is not tangent at {x:?}")));
            }
        }
    }
    let fields = Arc::new(GradientDynamics { embedding: e.clone(), drift });
    let mut sys = VectorFieldSystem::new(
        format!("gradient({})", e.name()),
        fields,
        Calculus::Stratonovich,
        model.clone(),
    )?;
    sys.gradient_of = Some(e);
    Ok(sys)
}

impl VectorFieldSystem {
    pub fn translation(n: usize) -> Self {
        VectorFieldSystem::new(
            format!("translation({n})"),
            Arc::new(Translation { dim: n }),
            Calculus::Stratonovich,
            ManifoldModel::flat(n),
        )
        .expect("dimensions agree")
    }

    /// `dx = dB + M x dt` on flat space.
    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(FlowError::Config("linear system needs a nonempty square matrix".into()));
        }
        let n = matrix.nrows();
        VectorFieldSystem::new(
            format!("linear({n})"),
            Arc::new(Linear { matrix, sigma: 1.0 }),
            Calculus::Stratonovich,
            ManifoldModel::flat(n),
        )
    }

    /// `dx = dB − x dt`.
    pub fn ornstein_uhlenbeck(n: usize) -> Self {
        let m = -DMatrix::identity(n, n);
        Self::linear(m).expect("square").renamed(format!("ou({n})"))
    }

    /// `X = 0`, `A = 0`.
    pub fn zero(n: usize) -> Self {
        VectorFieldSystem::new(
            format!("zero({n})"),
            Arc::new(Linear { matrix: DMatrix::zeros(n, n), sigma: 0.0 }),
            Calculus::Stratonovich,
            ManifoldModel::flat(n),
        )
        .expect("dimensions agree")
    }

    /// System from coefficient expressions; Itô input is converted to
    /// Stratonovich form once, here.
    pub fn from_expressions(
        name: impl Into<String>,
        drift: &[String],
        diffusion: &[Vec<String>],
        calculus: Calculus,
        model: ManifoldModel,
    ) -> Result<Self> {
        let fields = Arc::new(ExprDynamics::parse(drift, diffusion)?);
        let sys = VectorFieldSystem::new(name, fields, calculus, model)?;
        convert_calculus(&sys, Calculus::Stratonovich)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_system(drift: &str, diff: &str, calculus: Calculus) -> VectorFieldSystem {
        let fields = Arc::new(ExprDynamics::parse(&[drift.into()], &[vec![diff.into()]]).unwrap());
        VectorFieldSystem::new("s", fields, calculus, ManifoldModel::flat(1)).unwrap()
    }

    #[test]
    fn translation_drifts_agree_in_both_calculi() {
        let t = VectorFieldSystem::translation(2);
        let ito = convert_calculus(&t, Calculus::Ito).unwrap();
        assert_eq!(ito.drift_vec(&[0.3, 1.0]), t.drift_vec(&[0.3, 1.0]));
    }

    #[test]
    fn geometric_noise_stratonovich_drift() {
        // Itô dx = x dB  ⇒  Stratonovich drift −x/2.
        let ito = scalar_system("0", "x", Calculus::Ito);
        let strat = convert_calculus(&ito, Calculus::Stratonovich).unwrap();
        for x in [-2.0, 0.5, 3.0] {
            assert_abs_diff_eq!(strat.drift_vec(&[x])[0], -x / 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn calculus_round_trip() {
        let ou = VectorFieldSystem::ornstein_uhlenbeck(1);
        let back = convert_calculus(&convert_calculus(&ou, Calculus::Ito).unwrap(), Calculus::Stratonovich).unwrap();
        assert_eq!(back.drift_vec(&[1.7]), ou.drift_vec(&[1.7]));
        let ito = scalar_system("sin(x)", "1 + x^2/4", Calculus::Ito);
        let strat = convert_calculus(&ito, Calculus::Stratonovich).unwrap();
        let strat2 = scalar_system("0", "1 + x^2/4", Calculus::Stratonovich);
        let _ = strat2;
        let ito_again = convert_calculus(&strat, Calculus::Ito).unwrap();
        for x in [-1.0, 0.2, 2.5] {
            assert_abs_diff_eq!(ito_again.drift_vec(&[x])[0], ito.drift_vec(&[x])[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn missing_jacobian_is_a_capability_error() {
        struct Opaque;
        impl Dynamics for Opaque {
            fn dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn diffusion(&self, x: &[f64], out: &mut [f64]) {
                out[0] = x[0];
            }
            fn drift(&self, _x: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        let s = VectorFieldSystem::new("opaque", Arc::new(Opaque), Calculus::Ito, ManifoldModel::flat(1))
            .unwrap()
            .without_fd();
        assert!(matches!(convert_calculus(&s, Calculus::Stratonovich), Err(FlowError::Capability(_))));
    }

    #[test]
    fn effective_drift_examples() {
        let t = effective_drift(&VectorFieldSystem::translation(3)).unwrap();
        assert_eq!(t.a_x(&[1.0, 2.0, 3.0]).unwrap().norm(), 0.0);
        let ou = effective_drift(&VectorFieldSystem::ornstein_uhlenbeck(1)).unwrap();
        assert_abs_diff_eq!(ou.a_x(&[2.5]).unwrap()[0], -2.5);
        assert_eq!(ou.correction(&[2.5]).unwrap()[0], 0.0);
        let sphere = gradient_brownian_from_embedding(&ManifoldModel::embedded(Embedding::sphere(3)), None).unwrap();
        let dec = effective_drift(&sphere).unwrap();
        let x = [0.6, 0.0, 0.8];
        assert_abs_diff_eq!(dec.correction(&x).unwrap().norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dec.a_x(&x).unwrap().norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn adjoint_flips_drift_and_is_an_involution() {
        let ou = VectorFieldSystem::ornstein_uhlenbeck(1);
        let adj = adjoint(&ou).unwrap();
        assert_eq!(adj.drift_vec(&[1.5])[0], 1.5);
        assert_eq!(adjoint(&adj).unwrap().drift_vec(&[1.5]), ou.drift_vec(&[1.5]));
        let t = VectorFieldSystem::translation(2);
        assert_eq!(adjoint(&t).unwrap().drift_vec(&[1.0, 1.0]).norm(), 0.0);
    }

    #[test]
    fn sphere_gradient_system_coefficients() {
        let model = ManifoldModel::embedded(Embedding::sphere(3));
        let s = gradient_brownian_from_embedding(&model, None).unwrap();
        let x = [0.0, 0.0, 1.0];
        let x1 = s.apply_diffusion(&x, &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(x1.as_slice(), &[1.0, 0.0, 0.0][..], epsilon = 1e-15);
        // ∇X^i(v) = −⟨x, e_i⟩ v
        let y = [0.36, 0.48, 0.8];
        let v = model.tangent_project(&y, &[1.0, -1.0, 0.5]).unwrap();
        let cov = s.covariant_diffusion_derivative(&y, v.as_slice()).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!((&cov[i] + &v * y[i]).norm(), 0.0, epsilon = 1e-13);
        }
        assert!(s.is_isometric_at(&y, 1e-10).unwrap());
    }

    #[test]
    fn identity_slab_gives_translation() {
        let model = ManifoldModel::embedded(Embedding::flat_slab(2, 3));
        let s = gradient_brownian_from_embedding(&model, None).unwrap();
        let x = [0.3, -4.0, 0.0];
        let xm = s.diffusion_matrix(&x);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!((xm - expected).amax(), 0.0, epsilon = 1e-15);
        let mut jac = vec![0.0; 9];
        s.diffusion_jacobian(&x, &[1.0, 1.0, 0.0], &mut jac);
        assert!(jac.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn non_tangent_drift_is_rejected() {
        let model = ManifoldModel::embedded(Embedding::sphere(3));
        let radial = DriftField { f: Arc::new(|x: &[f64], out: &mut [f64]| out.copy_from_slice(x)), jacobian: None };
        assert!(matches!(
            gradient_brownian_from_embedding(&model, Some(radial)),
            Err(FlowError::Contract(_))
        ));
        assert!(matches!(
            gradient_brownian_from_embedding(&ManifoldModel::flat(2), None),
            Err(FlowError::Capability(_))
        ));
    }

    #[test]
    fn diffusion_is_linear_in_noise() {
        let fields = Arc::new(
            ExprDynamics::parse(
                &["0".into(), "0".into()],
                &[vec!["y^2 - x^2".into(), "2*x*y".into()], vec!["-2*x*y".into(), "y^2 - x^2".into()]],
            )
            .unwrap(),
        );
        let s = VectorFieldSystem::new("inv", fields, Calculus::Stratonovich, ManifoldModel::flat(2)).unwrap();
        let x = [0.4, -1.2];
        let (a, b) = (1.7, -0.3);
        let e1 = [0.2, 0.9];
        let e2 = [-1.1, 0.4];
        let combo = [a * e1[0] + b * e2[0], a * e1[1] + b * e2[1]];
        let lhs = s.apply_diffusion(&x, &combo);
        let rhs = s.apply_diffusion(&x, &e1) * a + s.apply_diffusion(&x, &e2) * b;
        assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);
    }
}
