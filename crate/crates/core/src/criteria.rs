//! Pointwise `H_p` forms, sampled growth conditions, Lyapunov drift bounds
//! and the verdict engine that maps them to completeness theorems.
//!
//! Every bound here is evaluated on a finite sample of points and tangent
//! directions. "certified" means every hypothesis was bounded on the sample
//! with no growth trend across radii; it is evidence, not a proof.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::geometry::{dot, norm, CurvatureData, EmbeddingKind, ManifoldModel, ModelKind};
use crate::systems::{adjoint, VectorFieldSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HpBackend {
    Euclidean,
    Ricci,
    Gauss,
}

impl fmt::Display for HpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HpBackend::Euclidean => "euclidean",
            HpBackend::Ricci => "ricci",
            HpBackend::Gauss => "gauss",
        };
        f.write_str(s)
    }
}

/// `H_p(x)(v,v) = drift + curvature + gradient + (p − 2) q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HpParts {
    pub drift: f64,
    pub curvature: f64,
    pub gradient: f64,
    pub q: f64,
}

impl HpParts {
    pub fn value(&self, p: f64) -> f64 {
        self.drift + self.curvature + self.gradient + (p - 2.0) * self.q
    }
}

fn check_vector(system: &VectorFieldSystem, x: &[f64], v: &[f64]) -> Result<f64> {
    let model = system.model();
    model.admissible(x)?;
    if v.len() != system.dim() {
        return Err(FlowError::Contract("v has the wrong length".into()));
    }
    let vv = dot(v, v);
    if vv == 0.0 {
        return Err(FlowError::Contract("H_p needs a nonzero tangent vector".into()));
    }
    if !model.is_tangent(x, v)? {
        return Err(FlowError::Contract("v is not tangent at x".into()));
    }
    Ok(vv)
}

fn ricci_value(model: &ManifoldModel, curvature: Option<&CurvatureData>, x: &[f64], v: &[f64]) -> Result<f64> {
    if let Some(r) = curvature.and_then(|c| c.ricci.as_ref()) {
        return Ok(r(x, v));
    }
    match model.kind() {
        ModelKind::Flat | ModelKind::PuncturedFlat { .. } => Ok(0.0),
        ModelKind::Embedded(_) => model.gauss_ricci(x, v),
        ModelKind::RescaledFlat { .. } => {
            Err(FlowError::Capability("no curvature is available for the rescaled metric".into()))
        }
    }
}

/// The terms of `H_p(x)(v,v)` in the requested backend.
pub fn hp_parts(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    x: &[f64],
    v: &[f64],
    backend: HpBackend,
) -> Result<HpParts> {
    system.require_stratonovich()?;
    let model = system.model();
    if matches!(model.kind(), ModelKind::RescaledFlat { .. }) {
        return Err(FlowError::Capability("H_p needs a connection, which the rescaled metric lacks".into()));
    }
    let vv = check_vector(system, x, v)?;
    match backend {
        HpBackend::Euclidean => {
            if !model.is_flat() {
                return Err(FlowError::Capability("the Euclidean backend needs a flat model".into()));
            }
            let (d, m) = (system.dim(), system.noise_dim());
            let mut jac = vec![0.0; d * m];
            system.diffusion_jacobian(x, v, &mut jac);
            let mut gradient = 0.0;
            let mut q = 0.0;
            for i in 0..m {
                let col = &jac[i * d..(i + 1) * d];
                gradient += dot(col, col);
                q += dot(col, v).powi(2) / vv;
            }
            // flat space: the Itô drift equals A^X
            let da = system.effective_drift_jacobian(x, v)?;
            Ok(HpParts { drift: 2.0 * dot(da.as_slice(), v), curvature: 0.0, gradient, q })
        }
        HpBackend::Ricci => {
            let has_ricci = curvature.is_some_and(|c| c.ricci.is_some());
            if !has_ricci && !model.is_flat() {
                return Err(FlowError::Capability("the Ricci backend needs a Ricci curvature input".into()));
            }
            if !system.is_isometric_at(x, 1e-8)? {
                return Err(FlowError::Capability(
                    "the Ricci backend needs a Brownian system (X X^* = id on T_xM)".into(),
                ));
            }
            let ric = ricci_value(model, curvature, x, v)?;
            let cov = system.covariant_diffusion_derivative(x, v)?;
            let gradient = cov.iter().map(|c| c.norm_squared()).sum();
            let q = cov.iter().map(|c| dot(c.as_slice(), v).powi(2)).sum::<f64>() / vv;
            let dz = system.effective_drift_jacobian(x, v)?;
            Ok(HpParts { drift: 2.0 * dot(dz.as_slice(), v), curvature: -ric, gradient, q })
        }
        HpBackend::Gauss => {
            if system.gradient_embedding().is_none() {
                return Err(FlowError::Capability("the Gauss backend needs a gradient Brownian system".into()));
            }
            let avv = model.second_fundamental_form(x, v, v)?;
            let tr = model.mean_curvature_vector(x)?;
            let hs = model.alpha_hs_norm_sq(x, v)?;
            let dz = system.effective_drift_jacobian(x, v)?;
            Ok(HpParts {
                drift: 2.0 * dot(dz.as_slice(), v),
                curvature: -avv.dot(&tr) + hs,
                gradient: hs,
                q: avv.norm_squared() / vv,
            })
        }
    }
}

pub fn eval_hp(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    x: &[f64],
    v: &[f64],
    p: f64,
    backend: HpBackend,
) -> Result<f64> {
    Ok(hp_parts(system, curvature, x, v, backend)?.value(p))
}

/// `H̃`: the `p = 0` member of the affine family.
pub fn eval_htilde(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    x: &[f64],
    v: &[f64],
    backend: HpBackend,
) -> Result<f64> {
    eval_hp(system, curvature, x, v, 0.0, backend)
}

/// Backends that apply to the system, in order of preference.
pub fn available_backends(system: &VectorFieldSystem, curvature: Option<&CurvatureData>) -> Vec<HpBackend> {
    let model = system.model();
    let mut out = Vec::new();
    if model.is_flat() {
        out.push(HpBackend::Euclidean);
    }
    if system.gradient_embedding().is_some() {
        out.push(HpBackend::Gauss);
    }
    let has_ricci = curvature.is_some_and(|c| c.ricci.is_some()) || model.is_flat();
    if has_ricci && !matches!(model.kind(), ModelKind::RescaledFlat { .. }) {
        let probe = probe_point(model);
        if probe.is_some_and(|x| system.is_isometric_at(&x, 1e-8).unwrap_or(false)) {
            out.push(HpBackend::Ricci);
        }
    }
    out
}

fn probe_point(model: &ManifoldModel) -> Option<Vec<f64>> {
    let n = model.ambient_dim();
    let mut x: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    if let Some(e) = model.embedding() {
        e.retract(&mut x).ok()?;
    }
    model.admissible(&x).ok().map(|_| x)
}

/// `sup_{|v|=1} H_p(x)(v,v)` over a deterministic sample of unit tangent
/// directions (`extra` Halton combinations on top of the basis pairs).
pub fn sup_hp_unit(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    x: &[f64],
    p: f64,
    backend: HpBackend,
    extra: usize,
) -> Result<f64> {
    let dirs = tangent_directions(&system.model().tangent_basis(x)?, extra);
    let mut best = f64::NEG_INFINITY;
    for v in dirs {
        best = best.max(eval_hp(system, curvature, x, &v, p, backend)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HpSample {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub value: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HpReport {
    pub backend: HpBackend,
    pub p: f64,
    /// `max H_p(x)(v,v) / |v|²` over the samples.
    pub max_ratio: f64,
    pub samples: Vec<HpSample>,
    /// Largest `|H_p^{backend} − H_p^{other}|` over the other backends that apply.
    pub disagreement: Option<f64>,
}

pub fn hp_scan(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    p: f64,
    backend: HpBackend,
    points: &[(Vec<f64>, Vec<f64>)],
) -> Result<HpReport> {
    let others: Vec<HpBackend> =
        available_backends(system, curvature).into_iter().filter(|b| *b != backend).collect();
    let mut samples = Vec::with_capacity(points.len());
    let mut disagreement: Option<f64> = None;
    let mut max_ratio = f64::NEG_INFINITY;
    for (x, v) in points {
        let value = eval_hp(system, curvature, x, v, p, backend)?;
        let ratio = value / dot(v, v);
        max_ratio = max_ratio.max(ratio);
        for b in &others {
            if let Ok(o) = eval_hp(system, curvature, x, v, p, *b) {
                let d = (o - value).abs();
                disagreement = Some(disagreement.map_or(d, |m| m.max(d)));
            }
        }
        samples.push(HpSample { x: x.clone(), v: v.clone(), value, ratio });
    }
    Ok(HpReport { backend, p, max_ratio, samples, disagreement })
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

pub(crate) fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Unit vectors in `R^dim` from the Halton sequence mapped to `[-1, 1]^dim`.
pub(crate) fn halton_directions(count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut i = 1u64;
    while out.len() < count && i < 100_000 {
        let u: Vec<f64> = (0..dim).map(|j| 2.0 * radical_inverse(i, PRIMES[j % 16]) - 1.0).collect();
        let n = norm(&u);
        if n > 1e-3 {
            out.push(u.iter().map(|a| a / n).collect());
        }
        i += 1;
    }
    out
}

/// Unit tangent directions from an orthonormal basis: the basis, normalized
/// pairwise sums and differences, and `extra` Halton combinations.
pub(crate) fn tangent_directions(basis: &DMatrix<f64>, extra: usize) -> Vec<Vec<f64>> {
    let n = basis.ncols();
    let col = |j: usize| DVector::from_iterator(basis.nrows(), basis.column(j).iter().copied());
    let mut out: Vec<DVector<f64>> = (0..n).map(col).collect();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..n {
        for k in j + 1..n {
            out.push((col(j) + col(k)) * s);
            out.push((col(j) - col(k)) * s);
        }
    }
    if n > 1 {
        for c in halton_directions(extra, n) {
            out.push(basis * DVector::from_vec(c));
        }
    }
    out.into_iter().map(|v| v.as_slice().to_vec()).collect()
}

/// Largest value of the quadratic form `Q` on unit tangent vectors, by
/// polarization in an orthonormal basis.
fn quadratic_sup(basis: &DMatrix<f64>, q: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let n = basis.ncols();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| basis.column(j).iter().copied().collect()).collect();
    let diag: Vec<f64> = cols.iter().map(|c| q(c)).collect::<Result<_>>()?;
    if n == 1 {
        return Ok(diag[0]);
    }
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = diag[j];
        for k in j + 1..n {
            let s: Vec<f64> = cols[j].iter().zip(&cols[k]).map(|(a, b)| a + b).collect();
            let off = 0.5 * (q(&s)? - diag[j] - diag[k]);
            m[(j, k)] = off;
            m[(k, j)] = off;
        }
    }
    Ok(SymmetricEigen::new(m).eigenvalues.max())
}

/// Radii × directions sample around a center (the pole if one is given).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRegion {
    pub center: Option<Vec<f64>>,
    pub r_min: f64,
    pub r_max: f64,
    pub shells: usize,
    pub directions: usize,
    pub tangent_directions: usize,
}

impl Default for SampleRegion {
    fn default() -> Self {
        SampleRegion { center: None, r_min: 1e-2, r_max: 1e3, shells: 16, directions: 32, tangent_directions: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shell {
    pub radius: f64,
    pub points: Vec<Vec<f64>>,
}

impl SampleRegion {
    pub fn radii(&self) -> Vec<f64> {
        let k = self.shells.max(1);
        if k == 1 {
            return vec![self.r_max];
        }
        let (a, b) = (self.r_min.ln(), self.r_max.ln());
        (0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()).collect()
    }

    fn center_for(&self, model: &ManifoldModel, curvature: Option<&CurvatureData>) -> Vec<f64> {
        self.center
            .clone()
            .or_else(|| curvature.and_then(|c| c.pole.clone()))
            .unwrap_or_else(|| vec![0.0; model.ambient_dim()])
    }

    /// Shell 0 is the center itself (radius 0), when admissible.
    pub fn shells(&self, model: &ManifoldModel, curvature: Option<&CurvatureData>) -> Vec<Shell> {
        let c = self.center_for(model, curvature);
        let n = model.ambient_dim();
        let dirs = halton_directions(self.directions.max(1), n);
        let place = |mut y: Vec<f64>| -> Option<Vec<f64>> {
            if let Some(e) = model.embedding() {
                e.retract(&mut y).ok()?;
            }
            model.admissible(&y).ok().map(|_| y)
        };
        let mut out = Vec::new();
        if let Some(x) = place(c.clone()) {
            out.push(Shell { radius: 0.0, points: vec![x] });
        }
        for r in self.radii() {
            let points: Vec<Vec<f64>> = dirs
                .iter()
                .filter_map(|u| place(c.iter().zip(u).map(|(a, b)| a + r * b).collect()))
                .collect();
            if !points.is_empty() {
                out.push(Shell { radius: r, points });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Bounded,
    Growing,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub point: Vec<f64>,
    pub ratio: f64,
}

/// One inequality `lhs ≤ c · rhs`, checked on samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub name: String,
    pub bound: String,
    /// Smallest constant that makes the inequality hold on every sample.
    pub constant: f64,
    pub trend: Trend,
    pub witness: Option<Witness>,
    /// `(radius, max ratio)` per shell.
    pub shell_max: Vec<(f64, f64)>,
    pub samples: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

type RatioFn<'a> = Box<dyn Fn(&[f64]) -> Result<f64> + 'a>;

struct Condition<'a> {
    name: &'static str,
    bound: String,
    /// Ratios are clamped at zero (the inequality has a nonnegative right side).
    clamp: bool,
    eval: RatioFn<'a>,
}

fn classify(shell_max: &[(f64, f64)]) -> Trend {
    let vals: Vec<f64> = shell_max.iter().map(|s| s.1).collect();
    if vals.iter().any(|v| !v.is_finite() && *v > 0.0 || v.is_nan()) {
        return Trend::Growing;
    }
    if vals.len() < 3 {
        return Trend::Inconclusive;
    }
    let third = (vals.len() / 3).max(1);
    let inner = vals[..third].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let middle = vals[third..vals.len() - third].iter().copied().fold(inner, f64::max);
    let outer = vals[vals.len() - third..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let reference = inner.max(middle);
    let scale = reference.abs().max(1e-9);
    let delta = outer - reference;
    let tail = &vals[vals.len().saturating_sub(3)..];
    let rising = tail.windows(2).all(|w| w[1] >= w[0]);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let outer_lo = vals[vals.len() - third..].iter().copied().fold(f64::INFINITY, f64::min);
    // a settled outer third means the ratio has levelled off
    let settled = outer - outer_lo <= 0.05 * (hi - lo);
    if delta <= 0.5 * scale || settled {
        Trend::Bounded
    } else if delta > 3.0 * scale && rising {
        Trend::Growing
    } else {
        Trend::Inconclusive
    }
}

fn run_condition(cond: &Condition<'_>, shells: &[Shell]) -> Result<ConditionReport> {
    let mut shell_max = Vec::with_capacity(shells.len());
    let mut best: Option<Witness> = None;
    let mut samples = 0;
    let mut skipped = 0;
    for shell in shells {
        let mut m = f64::NEG_INFINITY;
        for x in &shell.points {
            match (cond.eval)(x) {
                Ok(mut r) => {
                    if r.is_nan() {
                        r = f64::INFINITY;
                    }
                    if cond.clamp {
                        r = r.max(0.0);
                    }
                    samples += 1;
                    if best.as_ref().is_none_or(|w| r > w.ratio) {
                        best = Some(Witness { point: x.clone(), ratio: r });
                    }
                    m = m.max(r);
                }
                Err(FlowError::Singular(_)) | Err(FlowError::Domain(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if m > f64::NEG_INFINITY {
            shell_max.push((shell.radius, m));
        }
    }
    let constant = best.as_ref().map_or(f64::NAN, |w| w.ratio);
    let trend = classify(&shell_max);
    Ok(ConditionReport {
        name: cond.name.to_string(),
        bound: cond.bound.clone(),
        constant,
        trend,
        witness: if trend == Trend::Bounded { None } else { best },
        shell_max,
        samples,
        skipped,
        note: None,
    })
}

/// Pointwise quantities shared by the growth conditions.
struct Probe<'a> {
    sys: &'a VectorFieldSystem,
    curv: Option<&'a CurvatureData>,
    extra_dirs: usize,
    pole: Vec<f64>,
}

impl<'a> Probe<'a> {
    fn new(sys: &'a VectorFieldSystem, curv: Option<&'a CurvatureData>, region: &SampleRegion) -> Self {
        let pole = region.center_for(sys.model(), curv);
        Probe { sys, curv, extra_dirs: region.tangent_directions, pole }
    }

    fn model(&self) -> &ManifoldModel {
        self.sys.model()
    }

    fn basis(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.model().tangent_basis(x)
    }

    /// `|X(x)|² = Σ |X^i(x)|²`.
    fn x_sq(&self, x: &[f64]) -> f64 {
        let xm = self.sys.diffusion_matrix(x);
        xm.norm_squared()
    }

    fn max_col_sq(&self, x: &[f64]) -> f64 {
        let xm = self.sys.diffusion_matrix(x);
        xm.column_iter().map(|c| c.norm_squared()).fold(0.0, f64::max)
    }

    /// `|∇X(x)|² = Σ_i |∇X^i(x)|²_{HS}`.
    fn grad_x_sq(&self, x: &[f64]) -> Result<f64> {
        let b = self.basis(x)?;
        let mut s = 0.0;
        for j in 0..b.ncols() {
            let f: Vec<f64> = b.column(j).iter().copied().collect();
            s += self.sys.covariant_diffusion_derivative(x, &f)?.iter().map(|c| c.norm_squared()).sum::<f64>();
        }
        Ok(s)
    }

    /// `max_i |∇X^i(x)|²_{HS}`.
    fn max_grad_col_sq(&self, x: &[f64]) -> Result<f64> {
        let b = self.basis(x)?;
        let mut per = vec![0.0; self.sys.noise_dim()];
        for j in 0..b.ncols() {
            let f: Vec<f64> = b.column(j).iter().copied().collect();
            for (i, c) in self.sys.covariant_diffusion_derivative(x, &f)?.iter().enumerate() {
                per[i] += c.norm_squared();
            }
        }
        Ok(per.into_iter().fold(0.0, f64::max))
    }

    fn drift_form(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        Ok(dot(self.sys.effective_drift_jacobian(x, v)?.as_slice(), v))
    }

    /// `Σ_i ⟨R(X^i, v)X^i, v⟩` via the Gauss equation on embedded models.
    fn r_term(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        let model = self.model();
        match model.kind() {
            ModelKind::Flat | ModelKind::PuncturedFlat { .. } => Ok(0.0),
            ModelKind::RescaledFlat { .. } => {
                Err(FlowError::Capability("no curvature tensor for the rescaled metric".into()))
            }
            ModelKind::Embedded(_) => {
                let xm = self.sys.diffusion_matrix(x);
                let avv = model.second_fundamental_form(x, v, v)?;
                let mut s = 0.0;
                for col in xm.column_iter() {
                    let xi: Vec<f64> = col.iter().copied().collect();
                    if norm(&xi) == 0.0 {
                        continue;
                    }
                    let axx = model.second_fundamental_form(x, &xi, &xi)?;
                    let axv = model.second_fundamental_form(x, &xi, v)?;
                    s -= axx.dot(&avv) - axv.norm_squared();
                }
                Ok(s)
            }
        }
    }

    fn sup_quadratic(&self, x: &[f64], q: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
        quadratic_sup(&self.basis(x)?, q)
    }

    fn backend(&self) -> Result<HpBackend> {
        available_backends(self.sys, self.curv)
            .into_iter()
            .next()
            .ok_or_else(|| FlowError::Capability("no H_p backend applies to this system".into()))
    }

    /// `sup_{|v|=1} H_p(x)(v,v)` over the direction sample.
    fn sup_hp(&self, x: &[f64], p: f64, backend: HpBackend) -> Result<f64> {
        sup_hp_unit(self.sys, self.curv, x, p, backend, self.extra_dirs)
    }

    fn ricci(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        ricci_value(self.model(), self.curv, x, v)
    }

    /// Distance to the pole: the model's closed form when it has one.
    fn pole_r(&self, x: &[f64]) -> Result<(f64, DVector<f64>, f64)> {
        let data = match self.curv {
            Some(c) if c.pole.is_some() => c.clone(),
            Some(c) => c.clone().with_pole(self.pole.clone()),
            None => CurvatureData::default().with_pole(self.pole.clone()),
        };
        let pd = self.model().pole_distance(&data, x)?;
        Ok((pd.r, pd.dr, pd.hessian_bound))
    }

    /// Ambient distance to the pole, a conservative stand-in for `r`.
    fn ambient_r(&self, x: &[f64]) -> (f64, DVector<f64>) {
        let d: Vec<f64> = x.iter().zip(&self.pole).map(|(a, b)| a - b).collect();
        let r = norm(&d);
        let dr = if r > 0.0 { DVector::from_iterator(d.len(), d.iter().map(|a| a / r)) } else { DVector::zeros(d.len()) };
        (r, dr)
    }

    fn alpha_hs(&self, x: &[f64]) -> Result<f64> {
        let b = self.basis(x)?;
        let mut s = 0.0;
        for j in 0..b.ncols() {
            let f: Vec<f64> = b.column(j).iter().copied().collect();
            s += self.model().alpha_hs_norm_sq(x, &f)?;
        }
        Ok(s.sqrt())
    }

    fn z_norm_and_grad(&self, x: &[f64]) -> Result<(f64, f64)> {
        let z = self.sys.effective_drift_at(x)?;
        let b = self.basis(x)?;
        let mut g = 0.0;
        for j in 0..b.ncols() {
            let f: Vec<f64> = b.column(j).iter().copied().collect();
            g += self.sys.effective_drift_jacobian(x, &f)?.norm_squared();
        }
        Ok((z.norm(), g.sqrt()))
    }
}

fn log1p_sq(x: &[f64]) -> f64 {
    1.0 + (dot(x, x)).ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GrowthKind {
    /// `|X(x)| ≤ c(1+|x|²)^{1/2}`, `⟨x, A(x)⟩ ≤ c(1+|x|²)`.
    LinearGrowth,
    /// `|∇X|² ≤ c[1+ln(1+|x|²)]`, `⟨∇A v, v⟩ ≤ c[1+ln(1+|x|²)]|v|²`.
    SubLogDerivative,
    /// Coefficient growth traded against derivative growth with exponent ε.
    EpsilonExponent { epsilon: f64 },
    /// The four conditions on manifolds with a pole.
    PoleConditions,
    /// `H_p(x)(v,v) ≤ c|v|²`.
    HBound { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthProfile {
    pub kind: GrowthKind,
    pub conditions: Vec<ConditionReport>,
    pub radii: Vec<f64>,
    /// Always "sampled-only": samples cannot prove a global bound.
    pub status: &'static str,
    pub bounded: bool,
}

fn growth_conditions<'a>(probe: &'a Probe<'a>, kind: GrowthKind) -> Result<Vec<Condition<'a>>> {
    let flat_only = || -> Result<()> {
        if matches!(probe.model().kind(), ModelKind::Flat) {
            Ok(())
        } else {
            Err(FlowError::Capability("this growth profile is stated on R^n".into()))
        }
    };
    let conds = match kind {
        GrowthKind::LinearGrowth => {
            flat_only()?;
            vec![
                Condition {
                    name: "diffusion_linear_growth",
                    bound: "|X(x)| <= c (1+|x|^2)^(1/2)".into(),
                    clamp: true,
                    eval: Box::new(move |x| Ok((probe.x_sq(x) / (1.0 + dot(x, x))).sqrt())),
                },
                Condition {
                    name: "drift_linear_growth",
                    bound: "<x, A(x)> <= c (1+|x|^2)".into(),
                    clamp: true,
                    eval: Box::new(move |x| {
                        let a = probe.sys.effective_drift_at(x)?;
                        Ok(dot(x, a.as_slice()) / (1.0 + dot(x, x)))
                    }),
                },
            ]
        }
        GrowthKind::SubLogDerivative => {
            flat_only()?;
            vec![
                Condition {
                    name: "diffusion_derivative_sublog",
                    bound: "|DX(x)|^2 <= c [1+ln(1+|x|^2)]".into(),
                    clamp: true,
                    eval: Box::new(move |x| Ok(probe.grad_x_sq(x)? / log1p_sq(x))),
                },
                Condition {
                    name: "drift_derivative_sublog",
                    bound: "<DA(x)v, v> <= c [1+ln(1+|x|^2)] |v|^2".into(),
                    clamp: true,
                    eval: Box::new(move |x| Ok(probe.sup_quadratic(x, |v| probe.drift_form(x, v))? / log1p_sq(x))),
                },
            ]
        }
        GrowthKind::EpsilonExponent { epsilon } => {
            flat_only()?;
            if !(epsilon >= 0.0) {
                return Err(FlowError::Config("epsilon must be nonnegative".into()));
            }
            let w = move |x: &[f64], e: f64| (1.0 + dot(x, x)).powf(e);
            vec![
                Condition {
                    name: "diffusion_growth",
                    bound: format!("|X^i(x)| <= c (1+|x|^2)^(1/2-{epsilon})"),
                    clamp: true,
                    eval: Box::new(move |x| Ok(probe.max_col_sq(x).sqrt() / w(x, 0.5 - epsilon))),
                },
                Condition {
                    name: "drift_growth",
                    bound: format!("<x, A(x)> <= c (1+|x|^2)^(1-{epsilon})"),
                    clamp: true,
                    eval: Box::new(move |x| {
                        let a = probe.sys.effective_drift_at(x)?;
                        Ok(dot(x, a.as_slice()) / w(x, 1.0 - epsilon))
                    }),
                },
                Condition {
                    name: "diffusion_derivative_growth",
                    bound: format!("|DX^i(x)|^2 <= c (1+|x|^2)^{epsilon}"),
                    clamp: true,
                    eval: Box::new(move |x| Ok(probe.max_grad_col_sq(x)? / w(x, epsilon))),
                },
                Condition {
                    name: "drift_derivative_growth",
                    bound: format!("<DA(x)v, v> <= c (1+|x|^2)^{epsilon} |v|^2"),
                    clamp: true,
                    eval: Box::new(move |x| Ok(probe.sup_quadratic(x, |v| probe.drift_form(x, v))? / w(x, epsilon))),
                },
            ]
        }
        GrowthKind::PoleConditions => vec![
            Condition {
                name: "diffusion_vs_hessian_comparison",
                bound: "|X(x)|^2 <= c [1+r] / (L(r) coth(r L(r)))".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, hb) = probe.pole_r(x)?;
                    Ok(probe.x_sq(x) * hb / (1.0 + r))
                }),
            },
            Condition {
                name: "radial_drift",
                bound: "dr(A^X(x)) <= c [1+r]".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, dr, _) = probe.pole_r(x)?;
                    Ok(dr.dot(&probe.sys.effective_drift_at(x)?) / (1.0 + r))
                }),
            },
            Condition {
                name: "diffusion_derivative_sublog",
                bound: "|grad X(x)|^2 <= c [1+ln(1+r)]".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    Ok(probe.grad_x_sq(x)? / (1.0 + r.ln_1p()))
                }),
            },
            Condition {
                name: "drift_curvature_sublog",
                bound: "2<grad A^X v, v> + sum <R(X^i,v)X^i, v> <= c [1+ln(1+r)] |v|^2".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    let s = probe.sup_quadratic(x, |v| Ok(2.0 * probe.drift_form(x, v)? + probe.r_term(x, v)?))?;
                    Ok(s / (1.0 + r.ln_1p()))
                }),
            },
        ],
        GrowthKind::HBound { p } => {
            let backend = probe.backend()?;
            vec![Condition {
                name: "h_bound",
                bound: format!("H_{p}(x)(v,v) <= c |v|^2 ({backend} backend)"),
                clamp: false,
                eval: Box::new(move |x| probe.sup_hp(x, p, backend)),
            }]
        }
    };
    Ok(conds)
}

/// Minimal constants of a growth profile on the sample, per condition.
pub fn check_growth(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    kind: GrowthKind,
    region: &SampleRegion,
) -> Result<GrowthProfile> {
    system.require_stratonovich()?;
    let probe = Probe::new(system, curvature, region);
    let shells = region.shells(system.model(), curvature);
    let conds = growth_conditions(&probe, kind)?;
    let conditions: Vec<ConditionReport> = conds.iter().map(|c| run_condition(c, &shells)).collect::<Result<_>>()?;
    let bounded = conditions.iter().all(|c| c.trend == Trend::Bounded);
    Ok(GrowthProfile { kind, conditions, radii: region.radii(), status: "sampled-only", bounded })
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type HessianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A `C²` test function `g` with its derivatives.
#[derive(Clone)]
pub struct Potential {
    pub value: ScalarFn,
    pub gradient: Option<GradientFn>,
    pub hessian: Option<HessianFn>,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("gradient", &self.gradient.is_some())
            .field("hessian", &self.hessian.is_some())
            .finish()
    }
}

impl Potential {
    /// `g(x) = ln(1 + |x|²)`.
    pub fn log_one_plus_square() -> Self {
        Potential {
            value: Arc::new(|x| dot(x, x).ln_1p()),
            gradient: Some(Arc::new(|x| {
                let s = 1.0 + dot(x, x);
                DVector::from_iterator(x.len(), x.iter().map(|a| 2.0 * a / s))
            })),
            hessian: Some(Arc::new(|x| {
                let n = x.len();
                let s = 1.0 + dot(x, x);
                DMatrix::from_fn(n, n, |i, j| {
                    let id = if i == j { 2.0 / s } else { 0.0 };
                    id - 4.0 * x[i] * x[j] / (s * s)
                })
            })),
        }
    }

    pub fn constant(c: f64) -> Self {
        Potential {
            value: Arc::new(move |_| c),
            gradient: Some(Arc::new(|x| DVector::zeros(x.len()))),
            hessian: Some(Arc::new(|x| DMatrix::zeros(x.len(), x.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovBound {
    pub k: f64,
    pub argmax: Vec<f64>,
    pub samples: usize,
    /// `k(x)` did not settle across radii.
    pub unbounded: bool,
}

fn lyapunov_integrand(system: &VectorFieldSystem, g: &Potential, x: &[f64]) -> Result<f64> {
    let (grad, hess) = match (&g.gradient, &g.hessian) {
        (Some(a), Some(b)) => (a(x), b(x)),
        _ => return Err(FlowError::Capability("the test function needs a gradient and a Hessian".into())),
    };
    let xm = system.diffusion_matrix(x);
    let a = system.effective_drift_at(x)?;
    let mut k = grad.dot(&a);
    for col in xm.column_iter() {
        let dg = grad.dot(&col);
        k += 0.5 * dg * dg + 0.5 * (col.transpose() * &hess * col)[(0, 0)];
    }
    Ok(k)
}

/// `k = sup ½Σ|Dg(X^i)|² + ½ΣD²g(X^i,X^i) + Dg(A)` with `A` the Itô drift,
/// over the sample and refined by a local pattern search.
pub fn lyapunov_drift_bound(
    system: &VectorFieldSystem,
    g: &Potential,
    region: &SampleRegion,
) -> Result<LyapunovBound> {
    system.require_stratonovich()?;
    if !system.model().is_flat() {
        return Err(FlowError::Capability("the Lyapunov drift bound is stated on R^n".into()));
    }
    let shells = region.shells(system.model(), None);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut shell_max = Vec::new();
    let mut samples = 0;
    for shell in &shells {
        let mut m = f64::NEG_INFINITY;
        for x in &shell.points {
            let k = lyapunov_integrand(system, g, x)?;
            samples += 1;
            let k = if k.is_nan() { f64::INFINITY } else { k };
            if k > best.0 {
                best = (k, x.clone());
            }
            m = m.max(k);
        }
        shell_max.push((shell.radius, m));
    }
    let unbounded = classify(&shell_max) == Trend::Growing;
    if best.0.is_finite() && !unbounded {
        let n = best.1.len();
        let mut x = best.1.clone();
        let mut step = 0.1 * norm(&x).max(1.0);
        let mut k = best.0;
        for _ in 0..200 {
            let mut improved = false;
            for j in 0..n {
                for s in [step, -step] {
                    let mut y = x.clone();
                    y[j] += s;
                    if let Ok(ky) = lyapunov_integrand(system, g, &y) {
                        if ky > k {
                            k = ky;
                            x = y;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < 1e-10 {
                    break;
                }
            }
        }
        best = (k, x);
    }
    Ok(LyapunovBound { k: best.0, argmax: best.1, samples, unbounded })
}

/// Theorems the verdict engine knows about. The string ids are part of the
/// report format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Theorem {
    ExponentialMoment,
    BoundedDerivative,
    OneCompleteness,
    EuclideanGrowth,
    EuclideanEpsilon,
    PoleGrowth,
    PoleRelaxed,
    BrownianBoundedRicci,
    BrownianRicciGrowth,
    GradientBrownian,
    GradientGirsanov,
    Diffeomorphism,
}

impl Theorem {
    pub const ALL: [Theorem; 12] = [
        Theorem::ExponentialMoment,
        Theorem::BoundedDerivative,
        Theorem::OneCompleteness,
        Theorem::EuclideanGrowth,
        Theorem::EuclideanEpsilon,
        Theorem::PoleGrowth,
        Theorem::PoleRelaxed,
        Theorem::BrownianBoundedRicci,
        Theorem::BrownianRicciGrowth,
        Theorem::GradientBrownian,
        Theorem::GradientGirsanov,
        Theorem::Diffeomorphism,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Theorem::ExponentialMoment => "Thm5.1",
            Theorem::BoundedDerivative => "Cor5.2",
            Theorem::OneCompleteness => "Thm5.3",
            Theorem::EuclideanGrowth => "Thm6.2",
            Theorem::EuclideanEpsilon => "Cor6.3",
            Theorem::PoleGrowth => "Thm7.1",
            Theorem::PoleRelaxed => "Prop7.2",
            Theorem::BrownianBoundedRicci => "Thm8.1",
            Theorem::BrownianRicciGrowth => "Thm8.2",
            Theorem::GradientBrownian => "Cor8.3",
            Theorem::GradientGirsanov => "Prop8.5",
            Theorem::Diffeomorphism => "Diffeo",
        }
    }

    pub fn from_id(s: &str) -> Option<Theorem> {
        Theorem::ALL.iter().copied().find(|t| t.id().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Certified,
    Failed,
    NotApplicable,
    SampledOnly,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Certified => "certified",
            Status::Failed => "failed",
            Status::NotApplicable => "not-applicable",
            Status::SampledOnly => "sampled-only",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerdictEntry {
    pub theorem: String,
    pub status: Status,
    pub constants: BTreeMap<String, f64>,
    pub samples: usize,
    pub conditions: Vec<ConditionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl VerdictEntry {
    fn not_applicable(theorem: &str, why: impl Into<String>) -> Self {
        VerdictEntry {
            theorem: theorem.to_string(),
            status: Status::NotApplicable,
            constants: BTreeMap::new(),
            samples: 0,
            conditions: Vec::new(),
            witness: None,
            notes: vec![why.into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerdictReport {
    pub system: String,
    pub model: String,
    pub entries: Vec<VerdictEntry>,
}

impl VerdictReport {
    pub fn entry(&self, theorem: &str) -> Option<&VerdictEntry> {
        self.entries.iter().find(|e| e.theorem == theorem)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdicts serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub theorems: Vec<String>,
    pub region: SampleRegion,
    /// Moment order for the `p`-dependent hypotheses.
    pub p: f64,
    pub epsilon: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            theorems: Theorem::ALL.iter().map(|t| t.id().to_string()).collect(),
            region: SampleRegion::default(),
            p: 2.0,
            epsilon: 0.25,
        }
    }
}

/// The Lyapunov condition with `g = ln(1+|x|²)` on R^n stands in for
/// completeness at one point.
fn completeness_condition<'a>(probe: &'a Probe<'a>) -> Option<Condition<'a>> {
    let model = probe.model();
    if model.is_flat() {
        let g = Potential::log_one_plus_square();
        Some(Condition {
            name: "completeness_lyapunov",
            bound: "1/2 sum|Dg(X^i)|^2 + 1/2 sum D^2g(X^i,X^i) + Dg(A) <= k, g = ln(1+|x|^2)".into(),
            clamp: false,
            eval: Box::new(move |x| lyapunov_integrand(probe.sys, &g, x)),
        })
    } else {
        None
    }
}

fn is_compact(model: &ManifoldModel) -> bool {
    model.embedding().is_some_and(|e| e.kind() == EmbeddingKind::Sphere)
}

fn fixed_condition(name: &str, bound: &str, trend: Trend, note: &str) -> ConditionReport {
    ConditionReport {
        name: name.into(),
        bound: bound.into(),
        constant: f64::NAN,
        trend,
        witness: None,
        shell_max: Vec::new(),
        samples: 0,
        skipped: 0,
        note: Some(note.into()),
    }
}

fn combine(theorem: Theorem, mut conditions: Vec<ConditionReport>, mut notes: Vec<String>, model: &ManifoldModel) -> VerdictEntry {
    match model.kind() {
        ModelKind::Flat => {}
        ModelKind::Embedded(_) if is_compact(model) => notes.push("compact manifold: complete".into()),
        ModelKind::Embedded(_) => notes.push("closed embedded submanifold: complete".into()),
        ModelKind::PuncturedFlat { .. } => conditions.push(fixed_condition(
            "manifold_complete",
            "M complete",
            Trend::Growing,
            "R^n minus a point is not complete",
        )),
        ModelKind::RescaledFlat { .. } => conditions.push(fixed_condition(
            "manifold_complete",
            "M complete",
            Trend::Inconclusive,
            "completeness of a rescaled metric is not checked",
        )),
    }
    let status = if conditions.iter().any(|c| c.trend == Trend::Growing) {
        Status::Failed
    } else if conditions.iter().all(|c| c.trend == Trend::Bounded) {
        Status::Certified
    } else {
        Status::SampledOnly
    };
    let witness = conditions
        .iter()
        .filter(|c| c.trend == Trend::Growing)
        .filter_map(|c| c.witness.clone())
        .max_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let constants = conditions.iter().map(|c| (c.name.clone(), c.constant)).collect();
    let samples = conditions.iter().map(|c| c.samples).max().unwrap_or(0);
    VerdictEntry { theorem: theorem.id().to_string(), status, constants, samples, conditions, witness, notes }
}

fn evaluate<'a>(conds: Vec<Condition<'a>>, shells: &[Shell]) -> Result<Vec<ConditionReport>> {
    conds.iter().map(|c| run_condition(c, shells)).collect()
}

fn require_brownian(probe: &Probe<'_>, shells: &[Shell]) -> Result<()> {
    for x in shells.iter().flat_map(|s| s.points.iter()).take(8) {
        if !probe.sys.is_isometric_at(x, 1e-8)? {
            return Err(FlowError::Capability("not a Brownian system: X X^* differs from the projection".into()));
        }
    }
    Ok(())
}

fn theorem_conditions<'a>(
    theorem: Theorem,
    probe: &'a Probe<'a>,
    shells: &[Shell],
    cfg: &CertifyConfig,
) -> Result<(Vec<Condition<'a>>, Vec<String>)> {
    let model = probe.model();
    let mut notes = Vec::new();
    let p = cfg.p;
    let mut conds: Vec<Condition<'a>> = Vec::new();
    match theorem {
        Theorem::ExponentialMoment => {
            let backend = probe.backend()?;
            conds.extend(completeness_condition(probe));
            conds.push(Condition {
                name: "f_bounded",
                bound: format!("f = max(|grad X|^2, H_{p}/(6p)) bounded, so the exponential moment is finite"),
                clamp: true,
                eval: Box::new(move |x| {
                    let h = probe.sup_hp(x, p, backend)?;
                    Ok(probe.grad_x_sq(x)?.max(h / (6.0 * p)))
                }),
            });
            notes.push("an unbounded f does not falsify the theorem; estimate the exponential moment instead".into());
        }
        Theorem::BoundedDerivative => {
            if matches!(model.kind(), ModelKind::RescaledFlat { .. }) {
                return Err(FlowError::Capability("needs a curvature tensor".into()));
            }
            conds.extend(completeness_condition(probe));
            conds.push(Condition {
                name: "grad_x_bounded",
                bound: "|grad X|^2 <= c".into(),
                clamp: true,
                eval: Box::new(move |x| probe.grad_x_sq(x)),
            });
            conds.push(Condition {
                name: "drift_curvature_bound",
                bound: "2<grad A^X v, v> + sum <R(X^i,v)X^i, v> <= c |v|^2".into(),
                clamp: false,
                eval: Box::new(move |x| {
                    probe.sup_quadratic(x, |v| Ok(2.0 * probe.drift_form(x, v)? + probe.r_term(x, v)?))
                }),
            });
        }
        Theorem::OneCompleteness => {
            let backend = probe.backend()?;
            conds.extend(completeness_condition(probe));
            conds.push(Condition {
                name: "h1_bound",
                bound: format!("H_1(x)(v,v) <= c |v|^2 ({backend} backend)"),
                clamp: false,
                eval: Box::new(move |x| probe.sup_hp(x, 1.0, backend)),
            });
        }
        Theorem::EuclideanGrowth => {
            conds.extend(growth_conditions(probe, GrowthKind::LinearGrowth)?);
            conds.extend(growth_conditions(probe, GrowthKind::SubLogDerivative)?);
        }
        Theorem::EuclideanEpsilon => {
            conds.extend(growth_conditions(probe, GrowthKind::EpsilonExponent { epsilon: cfg.epsilon })?);
        }
        Theorem::PoleGrowth => {
            pole_supported(probe)?;
            conds.extend(growth_conditions(probe, GrowthKind::PoleConditions)?);
        }
        Theorem::PoleRelaxed => {
            pole_supported(probe)?;
            let eps = cfg.epsilon;
            let backend = probe.backend()?;
            conds.push(Condition {
                name: "diffusion_vs_hessian_comparison",
                bound: format!("|X(x)|^2 <= c [1+r]^(2-{eps}) / (L coth(r L))"),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, hb) = probe.pole_r(x)?;
                    Ok(probe.x_sq(x) * hb / (1.0 + r).powf(2.0 - eps))
                }),
            });
            conds.push(Condition {
                name: "diffusion_derivative_growth",
                bound: format!("|grad X(x)|^2 <= c [1+r]^{eps}"),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    Ok(probe.grad_x_sq(x)? / (1.0 + r).powf(eps))
                }),
            });
            conds.push(Condition {
                name: "radial_drift",
                bound: format!("dr(A^X(x)) <= c [1+r]^(2-{eps})"),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, dr, _) = probe.pole_r(x)?;
                    Ok(dr.dot(&probe.sys.effective_drift_at(x)?) / (1.0 + r).powf(2.0 - eps))
                }),
            });
            conds.push(Condition {
                name: "h_growth",
                bound: format!("H_{p}(x)(v,v) <= c [1+r]^{eps} |v|^2"),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    Ok(probe.sup_hp(x, p, backend)? / (1.0 + r).powf(eps))
                }),
            });
        }
        Theorem::BrownianBoundedRicci => {
            require_brownian(probe, shells)?;
            conds.extend(completeness_condition(probe));
            conds.push(Condition {
                name: "grad_x_bounded",
                bound: "|grad X|^2 <= c".into(),
                clamp: true,
                eval: Box::new(move |x| probe.grad_x_sq(x)),
            });
            conds.push(Condition {
                name: "ricci_drift_lower_bound",
                bound: "<grad Z v, v> - 1/2 Ric(v,v) <= c |v|^2".into(),
                clamp: false,
                eval: Box::new(move |x| {
                    probe.sup_quadratic(x, |v| Ok(probe.drift_form(x, v)? - 0.5 * probe.ricci(x, v)?))
                }),
            });
        }
        Theorem::BrownianRicciGrowth => {
            require_brownian(probe, shells)?;
            pole_supported(probe)?;
            notes.push("cut-locus correction not modelled; samples at the pole or its cut locus are skipped".into());
            conds.push(Condition {
                name: "ricci_lower_bound",
                bound: "Ric(v,v) >= -c (1+r^2) |v|^2".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    Ok(probe.sup_quadratic(x, |v| Ok(-probe.ricci(x, v)?))? / (1.0 + r * r))
                }),
            });
            conds.push(Condition {
                name: "radial_drift",
                bound: "dr(Z) <= c [1+r]".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, dr, _) = probe.pole_r(x)?;
                    Ok(dr.dot(&probe.sys.effective_drift_at(x)?) / (1.0 + r))
                }),
            });
            conds.push(Condition {
                name: "diffusion_derivative_sublog",
                bound: "|grad X|^2 <= c [1+ln(1+r)]".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    Ok(probe.grad_x_sq(x)? / (1.0 + r.ln_1p()))
                }),
            });
            conds.push(Condition {
                name: "ricci_drift_sublog",
                bound: "2<grad Z v, v> - Ric(v,v) <= c [1+ln(1+r)] |v|^2".into(),
                clamp: true,
                eval: Box::new(move |x| {
                    let (r, _, _) = probe.pole_r(x)?;
                    let s = probe.sup_quadratic(x, |v| Ok(2.0 * probe.drift_form(x, v)? - probe.ricci(x, v)?))?;
                    Ok(s / (1.0 + r.ln_1p()))
                }),
            });
        }
        Theorem::GradientBrownian | Theorem::Diffeomorphism if probe.sys.gradient_embedding().is_some() => {
            notes.push("r is taken as the ambient distance to the pole, which bounds the intrinsic distance from below".into());
            conds.extend(gradient_conditions(probe, theorem == Theorem::Diffeomorphism));
        }
        Theorem::GradientBrownian => {
            return Err(FlowError::Capability("needs a gradient Brownian system".into()));
        }
        Theorem::GradientGirsanov => {
            if probe.sys.gradient_embedding().is_none() {
                return Err(FlowError::Capability("needs a gradient Brownian system".into()));
            }
            conds.push(Condition {
                name: "f_bounded_above",
                bound: "f = sup_{|v|=1} H_1(x)(v,v) <= c, so E exp(1/2 int f) <= exp(cT/2)".into(),
                clamp: false,
                eval: Box::new(move |x| probe.sup_hp(x, 1.0, HpBackend::Gauss)),
            });
        }
        Theorem::Diffeomorphism => unreachable!("handled by certify"),
    }
    Ok((conds, notes))
}

fn pole_supported(probe: &Probe<'_>) -> Result<()> {
    let x = probe_point(probe.model()).ok_or_else(|| FlowError::Capability("no admissible probe point".into()))?;
    match probe.pole_r(&x) {
        Ok(_) | Err(FlowError::Singular(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

fn gradient_conditions<'a>(probe: &'a Probe<'a>, diffeo: bool) -> Vec<Condition<'a>> {
    let mut c = vec![
        Condition {
            name: "alpha_bound",
            bound: "|alpha(x)| <= c [1+ln(1+r)]^(1/2)".into(),
            clamp: true,
            eval: Box::new(move |x| {
                let (r, _) = probe.ambient_r(x);
                Ok(probe.alpha_hs(x)? / (1.0 + r.ln_1p()).sqrt())
            }),
        },
        Condition {
            name: "radial_drift",
            bound: "dr(Z) <= c [1+r]".into(),
            clamp: true,
            eval: Box::new(move |x| {
                let (r, dr) = probe.ambient_r(x);
                Ok(dr.dot(&probe.sys.effective_drift_at(x)?) / (1.0 + r))
            }),
        },
        Condition {
            name: "drift_derivative_sublog",
            bound: "<grad Z v, v> <= c [1+ln(1+r)] |v|^2".into(),
            clamp: true,
            eval: Box::new(move |x| {
                let (r, _) = probe.ambient_r(x);
                Ok(probe.sup_quadratic(x, |v| probe.drift_form(x, v))? / (1.0 + r.ln_1p()))
            }),
        },
    ];
    if diffeo {
        c.push(Condition {
            name: "drift_linear_growth",
            bound: "|Z(x)| <= c [1+r]".into(),
            clamp: true,
            eval: Box::new(move |x| {
                let (r, _) = probe.ambient_r(x);
                Ok(probe.z_norm_and_grad(x)?.0 / (1.0 + r))
            }),
        });
        c.push(Condition {
            name: "drift_derivative_bound",
            bound: "|grad Z(x)| <= c [1+ln(1+r)]".into(),
            clamp: true,
            eval: Box::new(move |x| {
                let (r, _) = probe.ambient_r(x);
                Ok(probe.z_norm_and_grad(x)?.1 / (1.0 + r.ln_1p()))
            }),
        });
    }
    c
}

fn certify_one(
    theorem: Theorem,
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    shells: &[Shell],
    cfg: &CertifyConfig,
) -> VerdictEntry {
    let probe = Probe::new(system, curvature, &cfg.region);
    let result = theorem_conditions(theorem, &probe, shells, cfg)
        .and_then(|(conds, notes)| Ok((evaluate(conds, shells)?, notes)));
    match result {
        Ok((reports, notes)) => combine(theorem, reports, notes, system.model()),
        Err(e) => VerdictEntry::not_applicable(theorem.id(), e.to_string()),
    }
}

/// Evaluates the hypotheses of each requested theorem on the sample region.
pub fn certify(system: &VectorFieldSystem, curvature: Option<&CurvatureData>, cfg: &CertifyConfig) -> VerdictReport {
    let shells = cfg.region.shells(system.model(), curvature);
    let entries = cfg
        .theorems
        .iter()
        .map(|id| match Theorem::from_id(id) {
            None => VerdictEntry::not_applicable(id, format!("unknown theorem id `{id}`")),
            Some(Theorem::Diffeomorphism) if system.gradient_embedding().is_none() => {
                diffeomorphism_entry(system, curvature, &shells, cfg)
            }
            Some(t) => certify_one(t, system, curvature, &shells, cfg),
        })
        .collect();
    VerdictReport { system: system.name().to_string(), model: system.model().label(), entries }
}

/// Both the system and its adjoint must satisfy the bounded-derivative criterion.
fn diffeomorphism_entry(
    system: &VectorFieldSystem,
    curvature: Option<&CurvatureData>,
    shells: &[Shell],
    cfg: &CertifyConfig,
) -> VerdictEntry {
    let adj = match adjoint(system) {
        Ok(a) => a,
        Err(e) => return VerdictEntry::not_applicable("Diffeo", e.to_string()),
    };
    let fwd = certify_one(Theorem::BoundedDerivative, system, curvature, shells, cfg);
    let back = certify_one(Theorem::BoundedDerivative, &adj, curvature, shells, cfg);
    if fwd.status == Status::NotApplicable || back.status == Status::NotApplicable {
        let mut e = VerdictEntry::not_applicable("Diffeo", "the bounded-derivative criterion does not apply");
        e.notes.extend(fwd.notes.into_iter().chain(back.notes));
        return e;
    }
    let mut conditions = fwd.conditions;
    conditions.extend(back.conditions.into_iter().map(|mut c| {
        c.name = format!("adjoint.{}", c.name);
        c
    }));
    let mut notes = fwd.notes;
    notes.push("system and adjoint both checked against the bounded-derivative criterion".into());
    combine(Theorem::Diffeomorphism, conditions, notes, system.model())
}
