//! Geometric backends: flat and punctured Euclidean space, a conformally
//! rescaled plane, and submanifolds of R^m cut out by smooth constraints.
//!
//! Embedded models carry the tangent projection `P(x) = I - Y(x)` where
//! `Y(x)` is the orthogonal projection onto the normal space, the second
//! fundamental form `α_x(v, w) = (D_v P)(x) w`, and the quantities built from
//! it (trace, Hilbert-Schmidt norms, the Gauss-equation Ricci form).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FlowError, Result};

/// Relative step for central differences of the projection field.
pub const FD_REL_STEP: f64 = 1e-5;

/// Points closer than this to a puncture are rejected as inadmissible.
pub const PUNCTURE_EPS: f64 = 1e-12;

pub type ConstraintFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type ConstraintJacobian = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
/// `(x, v, w) -> (∇²φ_k(x)(v, w))_k`
pub type ConstraintHessian = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> DVector<f64> + Send + Sync>;
pub type WeightFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type RicciFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type LowerBoundFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Sphere,
    Paraboloid,
    FlatSlab,
    Custom,
}

/// A submanifold `{x ∈ R^m : φ(x) = 0}` with `φ: R^m → R^k` a submersion near
/// the manifold.
#[derive(Clone)]
pub struct Embedding {
    name: String,
    kind: EmbeddingKind,
    ambient_dim: usize,
    intrinsic_dim: usize,
    constraint: ConstraintFn,
    jacobian: ConstraintJacobian,
    hessian: Option<ConstraintHessian>,
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Embedding")
            .field("name", &self.name)
            .field("ambient_dim", &self.ambient_dim)
            .field("intrinsic_dim", &self.intrinsic_dim)
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl Embedding {
    /// Unit sphere `S^{m-1} ⊂ R^m`.
    pub fn sphere(ambient_dim: usize) -> Self {
        assert!(ambient_dim >= 2, "sphere needs ambient dimension >= 2");
        Embedding {
            name: format!("sphere({ambient_dim})"),
            kind: EmbeddingKind::Sphere,
            ambient_dim,
            intrinsic_dim: ambient_dim - 1,
            constraint: Arc::new(|x: &[f64]| {
                DVector::from_element(1, 0.5 * (x.iter().map(|a| a * a).sum::<f64>() - 1.0))
            }),
            jacobian: Arc::new(move |x: &[f64]| DMatrix::from_row_slice(1, x.len(), x)),
            hessian: Some(Arc::new(|_x: &[f64], v: &[f64], w: &[f64]| {
                DVector::from_element(1, dot(v, w))
            })),
        }
    }

    /// Graph of `z = (x² + y²)/2` in R³.
    pub fn paraboloid() -> Self {
        Embedding {
            name: "paraboloid".into(),
            kind: EmbeddingKind::Paraboloid,
            ambient_dim: 3,
            intrinsic_dim: 2,
            constraint: Arc::new(|x: &[f64]| {
                DVector::from_element(1, x[2] - 0.5 * (x[0] * x[0] + x[1] * x[1]))
            }),
            jacobian: Arc::new(|x: &[f64]| DMatrix::from_row_slice(1, 3, &[-x[0], -x[1], 1.0])),
            hessian: Some(Arc::new(|_x: &[f64], v: &[f64], w: &[f64]| {
                DVector::from_element(1, -(v[0] * w[0] + v[1] * w[1]))
            })),
        }
    }

    /// `R^n × {0} ⊂ R^m`, totally geodesic.
    pub fn flat_slab(intrinsic_dim: usize, ambient_dim: usize) -> Self {
        assert!(intrinsic_dim < ambient_dim);
        let k = ambient_dim - intrinsic_dim;
        Embedding {
            name: format!("flat_slab({intrinsic_dim},{ambient_dim})"),
            kind: EmbeddingKind::FlatSlab,
            ambient_dim,
            intrinsic_dim,
            constraint: Arc::new(move |x: &[f64]| DVector::from_column_slice(&x[intrinsic_dim..])),
            jacobian: Arc::new(move |_x: &[f64]| {
                let mut j = DMatrix::zeros(k, ambient_dim);
                for r in 0..k {
                    j[(r, intrinsic_dim + r)] = 1.0;
                }
                j
            }),
            hessian: Some(Arc::new(move |_x: &[f64], _v: &[f64], _w: &[f64]| DVector::zeros(k))),
        }
    }

    /// User-supplied constraint without second derivatives; the second
    /// fundamental form falls back to central differences of the projection.
    pub fn custom(
        name: impl Into<String>,
        ambient_dim: usize,
        intrinsic_dim: usize,
        constraint: ConstraintFn,
        jacobian: ConstraintJacobian,
    ) -> Self {
        Embedding {
            name: name.into(),
            kind: EmbeddingKind::Custom,
            ambient_dim,
            intrinsic_dim,
            constraint,
            jacobian,
            hessian: None,
        }
    }

    pub fn with_hessian(mut self, hessian: ConstraintHessian) -> Self {
        self.hessian = Some(hessian);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    pub fn constraint(&self, x: &[f64]) -> DVector<f64> {
        (self.constraint)(x)
    }

    fn gram_inverse(&self, j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        (j * j.transpose())
            .try_inverse()
            .ok_or_else(|| FlowError::Singular("constraint jacobian lost rank".into()))
    }

    /// Orthogonal projection `Y(x)` onto the normal space.
    pub fn normal_projection(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let j = (self.jacobian)(x);
        let g_inv = self.gram_inverse(&j)?;
        Ok(j.transpose() * g_inv * j)
    }

    /// Tangent projection `P(x) = I - Y(x)`.
    pub fn tangent_projection(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let y = self.normal_projection(x)?;
        Ok(DMatrix::identity(self.ambient_dim, self.ambient_dim) - y)
    }

    /// Directional derivative `D_v P(x)` of the tangent projection field.
    pub fn projection_derivative(&self, x: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
        match &self.hessian {
            Some(h) => {
                let m = self.ambient_dim;
                let j = (self.jacobian)(x);
                let k = j.nrows();
                let g_inv = self.gram_inverse(&j)?;
                let mut hv = DMatrix::zeros(k, m);
                let mut e = vec![0.0; m];
                for c in 0..m {
                    e[c] = 1.0;
                    let col = h(x, v, &e);
                    for r in 0..k {
                        hv[(r, c)] = col[r];
                    }
                    e[c] = 0.0;
                }
                let jt_ginv = j.transpose() * &g_inv;
                let ginv_j = &g_inv * &j;
                let dg = &hv * j.transpose() + &j * hv.transpose();
                let dy = hv.transpose() * &ginv_j + &jt_ginv * &hv - &jt_ginv * dg * &ginv_j;
                Ok(-dy)
            }
            None => self.projection_derivative_fd(x, v),
        }
    }

    fn projection_derivative_fd(&self, x: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
        let vn = norm(v);
        if vn == 0.0 {
            return Ok(DMatrix::zeros(self.ambient_dim, self.ambient_dim));
        }
        let h = FD_REL_STEP * norm(x).max(1.0);
        let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b / vn).collect();
        let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b / vn).collect();
        let pp = self.tangent_projection(&plus)?;
        let pm = self.tangent_projection(&minus)?;
        Ok((pp - pm) * (vn / (2.0 * h)))
    }

    /// Newton projection back onto `φ = 0` along the normal space.
    pub fn retract(&self, x: &mut [f64]) -> Result<()> {
        for _ in 0..50 {
            let c = (self.constraint)(x);
            if c.amax() <= 1e-15 * (1.0 + norm(x)) {
                return Ok(());
            }
            let j = (self.jacobian)(x);
            let g_inv = self.gram_inverse(&j)?;
            let step = j.transpose() * (g_inv * c);
            for (xi, s) in x.iter_mut().zip(step.iter()) {
                *xi -= s;
            }
            if x.iter().any(|a| !a.is_finite()) {
                return Err(FlowError::Domain("retraction diverged".into()));
            }
        }
        Ok(())
    }

    /// Orthonormal basis of `T_xM`, as columns.
    pub fn tangent_basis(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.tangent_projection(x)?;
        let eig = SymmetricEigen::new(p);
        let mut idx: Vec<usize> = (0..self.ambient_dim).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = DMatrix::zeros(self.ambient_dim, self.intrinsic_dim);
        for (c, &i) in idx.iter().take(self.intrinsic_dim).enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(i));
        }
        Ok(basis)
    }
}

/// Curvature inputs that cannot be derived from the model itself.
#[derive(Clone, Default)]
pub struct CurvatureData {
    pub ricci: Option<RicciFn>,
    pub sectional_lower_bound: Option<LowerBoundFn>,
    pub pole: Option<Vec<f64>>,
}

impl fmt::Debug for CurvatureData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CurvatureData")
            .field("ricci", &self.ricci.is_some())
            .field("sectional_lower_bound", &self.sectional_lower_bound.is_some())
            .field("pole", &self.pole)
            .finish()
    }
}

impl CurvatureData {
    /// Flat curvature with pole at the origin of R^n.
    pub fn flat(n: usize) -> Self {
        CurvatureData {
            ricci: Some(Arc::new(|_x: &[f64], _v: &[f64]| 0.0)),
            sectional_lower_bound: None,
            pole: Some(vec![0.0; n]),
        }
    }

    pub fn with_ricci(mut self, ricci: RicciFn) -> Self {
        self.ricci = Some(ricci);
        self
    }

    pub fn with_lower_bound(mut self, l: LowerBoundFn) -> Self {
        self.sectional_lower_bound = Some(l);
        self
    }

    pub fn with_pole(mut self, pole: Vec<f64>) -> Self {
        self.pole = Some(pole);
        self
    }

    /// `L(r)`, defaulting to 1.
    pub fn lower_bound(&self, r: f64) -> f64 {
        self.sectional_lower_bound.as_ref().map_or(1.0, |l| l(r))
    }

    /// Checks `L ≥ 1` and monotonicity on the given radii.
    pub fn validate_lower_bound(&self, radii: &[f64]) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        let mut sorted = radii.to_vec();
        sorted.sort_by(f64::total_cmp);
        for r in sorted {
            let l = self.lower_bound(r);
            if !(l >= 1.0) {
                return Err(FlowError::Contract(format!("L({r}) = {l} < 1")));
            }
            if l < prev {
                return Err(FlowError::Contract(format!("L decreases at r = {r}")));
            }
            prev = l;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub enum ModelKind {
    Flat,
    PuncturedFlat { puncture: Vec<f64> },
    /// `|v|^# = w(x)|v|`.
    RescaledFlat { weight: WeightFn, label: String },
    Embedded(Arc<Embedding>),
}

#[derive(Clone)]
pub struct ManifoldModel {
    kind: ModelKind,
    ambient_dim: usize,
    intrinsic_dim: usize,
}

impl fmt::Debug for ManifoldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ManifoldModel({})", self.label())
    }
}

/// Output of [`ManifoldModel::pole_distance`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoleDistance {
    pub r: f64,
    pub dr: DVector<f64>,
    /// Hessian comparison bound `L(r) coth(r L(r))`.
    pub hessian_bound: f64,
}

/// `L coth(r L)`, the comparison bound on `∇²r`.
pub fn hessian_comparison_bound(r: f64, l: f64) -> f64 {
    let a = r * l;
    l / a.tanh()
}

impl ManifoldModel {
    pub fn flat(n: usize) -> Self {
        ManifoldModel { kind: ModelKind::Flat, ambient_dim: n, intrinsic_dim: n }
    }

    pub fn punctured_flat(n: usize, puncture: Vec<f64>) -> Self {
        assert_eq!(puncture.len(), n);
        ManifoldModel { kind: ModelKind::PuncturedFlat { puncture }, ambient_dim: n, intrinsic_dim: n }
    }

    pub fn rescaled_flat(n: usize, label: impl Into<String>, weight: WeightFn) -> Self {
        ManifoldModel {
            kind: ModelKind::RescaledFlat { weight, label: label.into() },
            ambient_dim: n,
            intrinsic_dim: n,
        }
    }

    /// `R^n \ {0}` with `|v|^# = |v| / |x|`, which puts the origin at infinity.
    pub fn inverse_radius_plane(n: usize) -> Self {
        Self::rescaled_flat(n, "1/|x|", Arc::new(|x: &[f64]| 1.0 / norm(x)))
    }

    pub fn embedded(e: Embedding) -> Self {
        let (m, n) = (e.ambient_dim, e.intrinsic_dim);
        ManifoldModel { kind: ModelKind::Embedded(Arc::new(e)), ambient_dim: m, intrinsic_dim: n }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn embedding(&self) -> Option<&Arc<Embedding>> {
        match &self.kind {
            ModelKind::Embedded(e) => Some(e),
            _ => None,
        }
    }

    /// Euclidean metric in the ambient coordinates (flat, punctured flat).
    pub fn is_flat(&self) -> bool {
        matches!(self.kind, ModelKind::Flat | ModelKind::PuncturedFlat { .. })
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ModelKind::Flat => format!("flat({})", self.ambient_dim),
            ModelKind::PuncturedFlat { .. } => format!("punctured_flat({})", self.ambient_dim),
            ModelKind::RescaledFlat { label, .. } => format!("rescaled_flat({},{label})", self.ambient_dim),
            ModelKind::Embedded(e) => format!("embedded({})", e.name),
        }
    }

    fn check_dim(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(FlowError::Contract(format!(
                "{what} has length {} but the model lives in R^{}",
                x.len(),
                self.ambient_dim
            )));
        }
        Ok(())
    }

    pub fn admissible(&self, x: &[f64]) -> Result<()> {
        self.check_dim(x, "point")?;
        if x.iter().any(|a| !a.is_finite()) {
            return Err(FlowError::Domain("non-finite coordinates".into()));
        }
        match &self.kind {
            ModelKind::Flat => Ok(()),
            ModelKind::PuncturedFlat { puncture } => {
                if dist(x, puncture) <= PUNCTURE_EPS {
                    Err(FlowError::Domain("point coincides with the puncture".into()))
                } else {
                    Ok(())
                }
            }
            ModelKind::RescaledFlat { weight, .. } => {
                let w = weight(x);
                if w.is_finite() && w > 0.0 {
                    Ok(())
                } else {
                    Err(FlowError::Domain(format!("metric weight {w} is not positive and finite")))
                }
            }
            ModelKind::Embedded(e) => {
                let c = e.constraint(x);
                if c.amax() <= 1e-6 * (1.0 + norm(x)) {
                    Ok(())
                } else {
                    Err(FlowError::Domain(format!("point is off the submanifold by {:.3e}", c.amax())))
                }
            }
        }
    }

    /// Tangent projection matrix; the identity for non-embedded models.
    pub fn projection_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.admissible(x)?;
        match &self.kind {
            ModelKind::Embedded(e) => e.tangent_projection(x),
            _ => Ok(DMatrix::identity(self.ambient_dim, self.ambient_dim)),
        }
    }

    pub fn tangent_project(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(u, "vector")?;
        let p = self.projection_matrix(x)?;
        Ok(p * DVector::from_column_slice(u))
    }

    /// Whether `v` lies in `T_xM` up to `1e-8 (1 + |v|)`.
    pub fn is_tangent(&self, x: &[f64], v: &[f64]) -> Result<bool> {
        let pv = self.tangent_project(x, v)?;
        let off = pv.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Ok(off <= 1e-8 * (1.0 + norm(v)))
    }

    fn require_tangent(&self, x: &[f64], v: &[f64], what: &str) -> Result<()> {
        if self.is_tangent(x, v)? {
            Ok(())
        } else {
            Err(FlowError::Contract(format!("{what} is not tangent at x")))
        }
    }

    pub fn tangent_basis(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.admissible(x)?;
        match &self.kind {
            ModelKind::Embedded(e) => e.tangent_basis(x),
            _ => Ok(DMatrix::identity(self.ambient_dim, self.ambient_dim)),
        }
    }

    /// Second fundamental form `α_x(v, w)`, a normal vector. Analytic when
    /// the constraint carries second derivatives, central differences of the
    /// projection field otherwise. Zero for non-embedded models.
    pub fn second_fundamental_form(&self, x: &[f64], v: &[f64], w: &[f64]) -> Result<DVector<f64>> {
        self.admissible(x)?;
        self.check_dim(v, "v")?;
        self.check_dim(w, "w")?;
        let e = match &self.kind {
            ModelKind::Embedded(e) => e,
            _ => {
                return Err(FlowError::Capability(
                    "second fundamental form requires an embedded model".into(),
                ))
            }
        };
        self.require_tangent(x, v, "v")?;
        self.require_tangent(x, w, "w")?;
        match &e.hessian {
            Some(h) => {
                let j = (e.jacobian)(x);
                let g_inv = e.gram_inverse(&j)?;
                Ok(-(j.transpose() * (g_inv * h(x, v, w))))
            }
            None => {
                let dp = e.projection_derivative_fd(x, v)?;
                Ok(dp * DVector::from_column_slice(w))
            }
        }
    }

    /// `trace α = Σ_j α(f_j, f_j)` over an orthonormal tangent frame.
    pub fn mean_curvature_vector(&self, x: &[f64]) -> Result<DVector<f64>> {
        let basis = self.tangent_basis(x)?;
        let mut tr = DVector::zeros(self.ambient_dim);
        for c in 0..basis.ncols() {
            let f: Vec<f64> = basis.column(c).iter().copied().collect();
            tr += self.second_fundamental_form(x, &f, &f)?;
        }
        Ok(tr)
    }

    /// `|α(v, ·)|²_{HS}`.
    pub fn alpha_hs_norm_sq(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        let basis = self.tangent_basis(x)?;
        let mut s = 0.0;
        for c in 0..basis.ncols() {
            let f: Vec<f64> = basis.column(c).iter().copied().collect();
            s += self.second_fundamental_form(x, v, &f)?.norm_squared();
        }
        Ok(s)
    }

    /// Shape operator `A_x(v, ν)`: the tangent vector with
    /// `⟨A_x(v, ν), u⟩ = ⟨α(v, u), ν⟩`.
    pub fn shape_operator(&self, x: &[f64], v: &[f64], normal: &[f64]) -> Result<DVector<f64>> {
        let basis = self.tangent_basis(x)?;
        let nu = DVector::from_column_slice(normal);
        let mut out = DVector::zeros(self.ambient_dim);
        for c in 0..basis.ncols() {
            let f: Vec<f64> = basis.column(c).iter().copied().collect();
            let coef = self.second_fundamental_form(x, v, &f)?.dot(&nu);
            out += basis.column(c) * coef;
        }
        Ok(out)
    }

    /// Ricci form from the Gauss equation:
    /// `Ric(v, v) = ⟨α(v, v), trace α⟩ - |α(v, ·)|²_{HS}`.
    pub fn gauss_ricci(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        let avv = self.second_fundamental_form(x, v, v)?;
        let tr = self.mean_curvature_vector(x)?;
        Ok(avv.dot(&tr) - self.alpha_hs_norm_sq(x, v)?)
    }

    pub fn metric_norm(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.admissible(x)?;
        self.check_dim(v, "vector")?;
        let e = norm(v);
        match &self.kind {
            ModelKind::RescaledFlat { weight, .. } => Ok(weight(x) * e),
            _ => Ok(e),
        }
    }

    /// Distance to the pole with its differential and the Hessian comparison
    /// bound. Available on flat models and on the built-in sphere and slab.
    pub fn pole_distance(&self, data: &CurvatureData, x: &[f64]) -> Result<PoleDistance> {
        let pole = data
            .pole
            .as_ref()
            .ok_or_else(|| FlowError::Contract("curvature data has no pole".into()))?;
        self.check_dim(pole, "pole")?;
        self.check_dim(x, "point")?;
        let (r, dr) = match &self.kind {
            ModelKind::Flat | ModelKind::PuncturedFlat { .. } => euclidean_pole(x, pole)?,
            ModelKind::Embedded(e) if e.kind == EmbeddingKind::FlatSlab => euclidean_pole(x, pole)?,
            ModelKind::Embedded(e) if e.kind == EmbeddingKind::Sphere => {
                self.admissible(x)?;
                let c = dot(x, pole).clamp(-1.0, 1.0);
                let r = c.acos();
                let s = r.sin();
                if s < 1e-12 {
                    return Err(FlowError::Singular(
                        "distance function is not smooth at the pole or its antipode".into(),
                    ));
                }
                let dr = DVector::from_iterator(x.len(), x.iter().zip(pole).map(|(xi, pi)| -(pi - c * xi) / s));
                (r, dr)
            }
            _ => {
                return Err(FlowError::Capability(format!(
                    "no closed-form distance function on {}",
                    self.label()
                )))
            }
        };
        let l = data.lower_bound(r);
        Ok(PoleDistance { r, dr, hessian_bound: hessian_comparison_bound(r, l) })
    }
}

fn euclidean_pole(x: &[f64], pole: &[f64]) -> Result<(f64, DVector<f64>)> {
    let r = dist(x, pole);
    if r < 1e-14 {
        return Err(FlowError::Singular("dr is undefined at the pole".into()));
    }
    let dr = DVector::from_iterator(x.len(), x.iter().zip(pole).map(|(a, b)| (a - b) / r));
    Ok((r, dr))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn flat_projection_is_identity() {
        let m = ManifoldModel::flat(2);
        let p = m.tangent_project(&[0.3, -1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn sphere_projection_drops_normal_component() {
        let m = ManifoldModel::embedded(Embedding::sphere(3));
        let p = m.tangent_project(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice(), &[1.0, 2.0, 0.0][..], epsilon = 1e-15);
        let n = m.tangent_project(&[0.0, 0.0, 1.0], &[0.0, 0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(n.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sphere_second_fundamental_form_at_north_pole() {
        let m = ManifoldModel::embedded(Embedding::sphere(3));
        let a = m.second_fundamental_form(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(a.as_slice(), &[0.0, 0.0, -1.0][..], epsilon = 1e-14);
        let z = m.second_fundamental_form(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn flat_slab_is_totally_geodesic() {
        let m = ManifoldModel::embedded(Embedding::flat_slab(2, 3));
        let a = m.second_fundamental_form(&[0.4, -2.0, 0.0], &[1.0, 2.0, 0.0], &[-3.0, 0.5, 0.0]).unwrap();
        assert_eq!(a.norm(), 0.0);
    }

    #[test]
    fn non_tangent_input_is_a_contract_error() {
        let m = ManifoldModel::embedded(Embedding::sphere(3));
        let err = m.second_fundamental_form(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]);
        assert!(matches!(err, Err(FlowError::Contract(_))));
    }

    #[test]
    fn fd_route_matches_analytic_route() {
        let s = Embedding::sphere(3);
        let c = s.constraint.clone();
        let j = s.jacobian.clone();
        let custom = ManifoldModel::embedded(Embedding::custom("fd-sphere", 3, 2, c, j));
        let exact = ManifoldModel::embedded(s);
        let x = [0.6, 0.0, 0.8];
        let v = [0.8, 0.0, -0.6];
        let w = [0.0, 1.0, 0.0];
        for (a, b) in [(&v, &v), (&v, &w), (&w, &w)] {
            let fd = custom.second_fundamental_form(&x, a, b).unwrap();
            let an = exact.second_fundamental_form(&x, a, b).unwrap();
            assert_abs_diff_eq!((fd - an).norm(), 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn rescaled_metric_norm() {
        let m = ManifoldModel::inverse_radius_plane(2);
        assert_abs_diff_eq!(m.metric_norm(&[2.0, 0.0], &[3.0, 0.0]).unwrap(), 1.5);
        assert_eq!(m.metric_norm(&[2.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(m.metric_norm(&[0.0, 0.0], &[1.0, 0.0]), Err(FlowError::Domain(_))));
        assert_abs_diff_eq!(ManifoldModel::flat(2).metric_norm(&[5.0, 1.0], &[3.0, 4.0]).unwrap(), 5.0);
    }

    #[test]
    fn puncture_is_inadmissible() {
        let m = ManifoldModel::punctured_flat(2, vec![0.0, 0.0]);
        assert!(matches!(m.tangent_project(&[0.0, 0.0], &[1.0, 0.0]), Err(FlowError::Domain(_))));
        assert!(m.tangent_project(&[1e-3, 0.0], &[1.0, 0.0]).is_ok());
    }

    #[test]
    fn flat_pole_distance() {
        let m = ManifoldModel::flat(3);
        let d = m.pole_distance(&CurvatureData::flat(3), &[3.0, 4.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d.r, 5.0);
        assert_abs_diff_eq!(d.dr.as_slice(), &[0.6, 0.8, 0.0][..], epsilon = 1e-15);
        assert!(matches!(
            m.pole_distance(&CurvatureData::flat(3), &[0.0, 0.0, 0.0]),
            Err(FlowError::Singular(_))
        ));
    }

    #[test]
    fn comparison_bound_values() {
        // coth(1) evaluated independently as (e² + 1) / (e² - 1).
        let e2 = std::f64::consts::E.powi(2);
        assert_abs_diff_eq!(hessian_comparison_bound(1.0, 1.0), (e2 + 1.0) / (e2 - 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(hessian_comparison_bound(1.0, 1.0), 1.3130352854993312, epsilon = 1e-12);
        assert_abs_diff_eq!(hessian_comparison_bound(50.0, 1.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sphere_pole_distance() {
        let m = ManifoldModel::embedded(Embedding::sphere(3));
        let data = CurvatureData::default().with_pole(vec![0.0, 0.0, 1.0]);
        let d = m.pole_distance(&data, &[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d.r, std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
        // Moving toward the equator increases r: dr points along -e_z projected.
        assert_abs_diff_eq!(d.dr.as_slice(), &[0.0, 0.0, -1.0][..], epsilon = 1e-15);
        assert!(matches!(m.pole_distance(&data, &[0.0, 0.0, -1.0]), Err(FlowError::Singular(_))));
    }

    #[test]
    fn lower_bound_validation() {
        let ok = CurvatureData::default().with_lower_bound(Arc::new(|r: f64| 1.0 + r));
        assert!(ok.validate_lower_bound(&[0.0, 1.0, 10.0]).is_ok());
        let bad = CurvatureData::default().with_lower_bound(Arc::new(|r: f64| 2.0 - r));
        assert!(bad.validate_lower_bound(&[0.0, 0.5, 2.0]).is_err());
    }

    #[test]
    fn retraction_lands_on_paraboloid() {
        let e = Embedding::paraboloid();
        let mut x = vec![1.0, 0.5, 0.2];
        e.retract(&mut x).unwrap();
        assert!(e.constraint(&x)[0].abs() < 1e-12);
    }

    #[test]
    fn shape_operator_pairs_with_second_fundamental_form() {
        let m = ManifoldModel::embedded(Embedding::paraboloid());
        let x = [0.5, -0.3, 0.17];
        let v = m.tangent_project(&x, &[1.0, 0.2, 0.0]).unwrap();
        let u = m.tangent_project(&x, &[-0.4, 1.0, 0.3]).unwrap();
        let nu: DVector<f64> = DVector::from_column_slice(&[0.0, 0.0, 1.0])
            - m.tangent_project(&x, &[0.0, 0.0, 1.0]).unwrap();
        let lhs = m.second_fundamental_form(&x, v.as_slice(), u.as_slice()).unwrap().dot(&nu);
        let rhs = m.shape_operator(&x, v.as_slice(), nu.as_slice()).unwrap().dot(&u);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
