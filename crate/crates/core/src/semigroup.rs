//! The transition semigroup `P_t f(x) = E f(F_t(x)) 1{t<ξ}`, the derivative
//! semigroup on 1-forms and the check `d(P_t f)(v) = δP_t(df)(v)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::estimators::{sample_paths, summarize, walk, Draws, McConfig, MomentEstimate, Scale, Tangent};
use crate::expr::{self, Expr};
use crate::flow::Frame;
use crate::geometry::{norm, FD_REL_STEP};
use crate::systems::VectorFieldSystem;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type DifferentialFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// A scalar function with its differential `df(x)(v)`.
#[derive(Clone)]
pub struct ScalarObservable {
    pub name: String,
    f: ValueFn,
    df: Option<DifferentialFn>,
    /// `|f|_∞` and `|df|_∞` when known.
    pub sup_f: Option<f64>,
    pub sup_df: Option<f64>,
}

impl fmt::Debug for ScalarObservable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarObservable")
            .field("name", &self.name)
            .field("analytic_df", &self.df.is_some())
            .finish()
    }
}

impl ScalarObservable {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ScalarObservable { name: name.into(), f: Arc::new(f), df: None, sup_f: None, sup_df: None }
    }

    pub fn with_df(mut self, df: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.df = Some(Arc::new(df));
        self
    }

    pub fn with_bounds(mut self, sup_f: Option<f64>, sup_df: Option<f64>) -> Self {
        self.sup_f = sup_f;
        self.sup_df = sup_df;
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), move |_| c).with_df(|_, _| 0.0).with_bounds(Some(c.abs()), Some(0.0))
    }

    /// `f(x) = x_i`.
    pub fn coordinate(i: usize) -> Self {
        Self::new(format!("x{}", i + 1), move |x| x[i]).with_df(move |_, v| v[i])
    }

    /// `f(x) = |x|²`.
    pub fn square_norm() -> Self {
        Self::new("|x|^2", |x| x.iter().map(|a| a * a).sum()).with_df(|x, v| 2.0 * x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
    }

    /// `f(x) = sin x_i`.
    pub fn sine(i: usize) -> Self {
        Self::new(format!("sin(x{})", i + 1), move |x| x[i].sin())
            .with_df(move |x, v| x[i].cos() * v[i])
            .with_bounds(Some(1.0), Some(1.0))
    }

    /// Parses an expression in `x1..xn` and differentiates it symbolically.
    pub fn from_expression(src: &str, dim: usize) -> Result<Self> {
        let e: Expr = expr::parse(src, dim)?;
        let grad: Vec<Expr> = (0..dim).map(|j| e.derivative(j)).collect();
        let f = e.clone();
        Ok(Self::new(src.trim(), move |x| f.eval(x))
            .with_df(move |x, v| grad.iter().zip(v).map(|(g, b)| g.eval(x) * b).sum()))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// `df(x)(v)`, by central differences when no analytic form was given.
    pub fn differential(&self, x: &[f64], v: &[f64]) -> f64 {
        if let Some(df) = &self.df {
            return df(x, v);
        }
        let nv = norm(v);
        if nv == 0.0 {
            return 0.0;
        }
        let h = FD_REL_STEP * norm(x).max(1.0) / nv;
        let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        ((self.f)(&plus) - (self.f)(&minus)) / (2.0 * h)
    }

    /// `df(x)(a v + b w) = a df(x)(v) + b df(x)(w)` to `tol`.
    pub fn is_linear_at(&self, x: &[f64], v: &[f64], w: &[f64], tol: f64) -> bool {
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = v.iter().zip(w).map(|(p, q)| a * p + b * q).collect();
        let lhs = self.differential(x, &mix);
        let rhs = a * self.differential(x, v) + b * self.differential(x, w);
        (lhs - rhs).abs() <= tol * (1.0 + lhs.abs().max(rhs.abs()))
    }
}

/// `P_t f(x)`: the mean of `f(F_t(x)) 1{t<ξ}`.
pub fn estimate_ptf(system: &VectorFieldSystem, f: &ScalarObservable, x: &[f64], cfg: &McConfig) -> Result<MomentEstimate> {
    let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| {
        let mut last = Vec::new();
        let status = walk(system, x, &mut Tangent::None, path, &cfg.options, |_, y, _| {
            last.clear();
            last.extend_from_slice(y);
            true
        })?;
        Ok(if status.is_alive() { (f.eval(&last), false) } else { (0.0, true) })
    })?;
    let truncations = fine.iter().filter(|a| a.1).count();
    let pick = |v: &Vec<(f64, bool)>| v.iter().map(|a| a.0).collect::<Vec<f64>>();
    Ok(summarize(&Draws { fine: pick(&fine), coarse: coarse.as_ref().map(pick), truncations }, Scale::Linear, cfg, false))
}

fn check_tangent(system: &VectorFieldSystem, x: &[f64], v: &[f64]) -> Result<()> {
    system.model().admissible(x)?;
    if v.len() != system.dim() {
        return Err(FlowError::Contract("v has the wrong length".into()));
    }
    if !system.model().is_tangent(x, v)? {
        return Err(FlowError::Contract("v is not tangent at x".into()));
    }
    Ok(())
}

/// Per path: `(df(F_t x)(T_xF_t v), |T_xF_t v|, truncated)`.
fn derivative_draw(
    system: &VectorFieldSystem,
    f: &ScalarObservable,
    x: &[f64],
    v: &[f64],
    path: &crate::flow::BrownianPath,
    cfg: &McConfig,
) -> Result<(f64, f64, bool)> {
    let mut tangent = Tangent::Frame(Frame::new(v.to_vec(), 1));
    let mut last = Vec::new();
    let status = walk(system, x, &mut tangent, path, &cfg.options, |_, y, _| {
        last.clear();
        last.extend_from_slice(y);
        true
    })?;
    if !status.is_alive() {
        return Ok((0.0, 0.0, true));
    }
    let vt = tangent.vector().expect("frame tangent");
    Ok((f.differential(&last, &vt), norm(&vt), false))
}

/// `δP_t(df)(v)`: the mean of `df(F_t x)(T_xF_t v) 1{t<ξ}`.
pub fn estimate_delta_pt(
    system: &VectorFieldSystem,
    f: &ScalarObservable,
    x: &[f64],
    v: &[f64],
    cfg: &McConfig,
) -> Result<MomentEstimate> {
    check_tangent(system, x, v)?;
    let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| derivative_draw(system, f, x, v, path, cfg))?;
    let truncations = fine.iter().filter(|a| a.2).count();
    let pick = |v: &Vec<(f64, f64, bool)>| v.iter().map(|a| a.0).collect::<Vec<f64>>();
    Ok(summarize(&Draws { fine: pick(&fine), coarse: coarse.as_ref().map(pick), truncations }, Scale::Linear, cfg, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyOptions {
    pub eps_ladder: Vec<f64>,
    /// The step whose quotient is compared against `δP_t(df)`.
    pub eps: f64,
    /// Number of nodes of the continuity probe along `r ↦ x + r v`.
    pub probe_nodes: usize,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        ConsistencyOptions { eps_ladder: vec![1e-1, 1e-2, 1e-3], eps: 1e-2, probe_nodes: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderRung {
    pub eps: f64,
    pub fd: MomentEstimate,
    pub discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeNode {
    pub r: f64,
    /// `E |T_{x+rv}F_t(v)|`.
    pub mean_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// Common-noise difference quotient `(P_tf(x+εv) − P_tf(x))/ε`.
    pub lhs: f64,
    /// `δP_t(df)(v)`.
    pub rhs: f64,
    pub se_lhs: f64,
    pub se_rhs: f64,
    /// `|lhs − rhs| ≤ 3 √(se_lhs² + se_rhs²)`.
    pub pass: bool,
    pub eps: f64,
    pub lhs_estimate: MomentEstimate,
    pub rhs_estimate: MomentEstimate,
    pub ladder: Vec<LadderRung>,
    /// Slope of `ln|FD(ε) − rhs|` against `ln ε`; near 1 for a smooth
    /// `P_tf`, undefined when every discrepancy is at rounding level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub richardson_slope: Option<f64>,
    /// Diagnostic only: continuity of `r ↦ E|T_{σ(r)}F_t|` is assumed, not tested.
    pub continuity_probe: Vec<ProbeNode>,
}

fn fd_estimate(
    system: &VectorFieldSystem,
    f: &ScalarObservable,
    x: &[f64],
    v: &[f64],
    eps: f64,
    cfg: &McConfig,
) -> Result<MomentEstimate> {
    let shifted: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let mut xs = shifted.clone();
    if let Some(e) = system.model().embedding() {
        e.retract(&mut xs)?;
    }
    system.model().admissible(&xs)?;
    let terminal = |start: &[f64], path: &crate::flow::BrownianPath| -> Result<Option<f64>> {
        let mut last = Vec::new();
        let status = walk(system, start, &mut Tangent::None, path, &cfg.options, |_, y, _| {
            last.clear();
            last.extend_from_slice(y);
            true
        })?;
        Ok(status.is_alive().then(|| f.eval(&last)))
    };
    let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| {
        let a = terminal(&xs, path)?;
        let b = terminal(x, path)?;
        let q = a.unwrap_or(0.0) - b.unwrap_or(0.0);
        let scale = a.unwrap_or(0.0).abs().max(b.unwrap_or(0.0).abs());
        Ok((q / eps, scale, a.is_none() || b.is_none()))
    })?;
    let truncations = fine.iter().filter(|a| a.2).count();
    let pick = |v: &Vec<(f64, f64, bool)>| v.iter().map(|a| a.0).collect::<Vec<f64>>();
    let mut est = summarize(&Draws { fine: pick(&fine), coarse: coarse.as_ref().map(pick), truncations }, Scale::Linear, cfg, false);
    // cancellation in the difference quotient
    let mean_scale = fine.iter().map(|a| a.1).sum::<f64>() / fine.len() as f64;
    let cancel = 4.0 * f64::EPSILON * mean_scale / eps;
    if !est.invalid {
        est.numerical += cancel;
        est.uncertainty = est.se.hypot(est.numerical);
        let z = cfg.z();
        est.ci_low = est.value - z * est.uncertainty;
        est.ci_high = est.value + z * est.uncertainty;
    }
    Ok(est)
}

/// Compares the common-noise difference quotient of `P_t f` with `δP_t(df)`.
pub fn gradient_consistency_check(
    system: &VectorFieldSystem,
    f: &ScalarObservable,
    x: &[f64],
    v: &[f64],
    cfg: &McConfig,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyReport> {
    check_tangent(system, x, v)?;
    if !(opts.eps > 0.0) || opts.eps_ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(FlowError::Config("finite-difference steps must be positive".into()));
    }
    let rhs = estimate_delta_pt(system, f, x, v, cfg)?;
    let lhs = fd_estimate(system, f, x, v, opts.eps, cfg)?;
    let mut ladder = Vec::with_capacity(opts.eps_ladder.len());
    for &e in &opts.eps_ladder {
        let fd = if e == opts.eps { lhs.clone() } else { fd_estimate(system, f, x, v, e, cfg)? };
        let discrepancy = (fd.value - rhs.value).abs();
        ladder.push(LadderRung { eps: e, fd, discrepancy });
    }
    let pts: Vec<(f64, f64)> = ladder
        .iter()
        .filter(|r| r.discrepancy > 1e3 * f64::EPSILON * (1.0 + rhs.value.abs()) / r.eps)
        .map(|r| (r.eps.ln(), r.discrepancy.ln()))
        .collect();
    let richardson_slope = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    let nodes = opts.probe_nodes.max(2);
    let reach = opts.eps_ladder.iter().copied().fold(opts.eps, f64::max);
    let mut continuity_probe = Vec::with_capacity(nodes);
    let probe_cfg = McConfig { paths: cfg.paths.min(1000), richardson: false, ..cfg.clone() };
    for j in 0..nodes {
        let r = reach * j as f64 / (nodes - 1) as f64;
        let mut y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + r * b).collect();
        if let Some(e) = system.model().embedding() {
            e.retract(&mut y)?;
        }
        let w = system.model().tangent_project(&y, v)?;
        let (norms, _) = sample_paths(&probe_cfg, system.noise_dim(), |path| {
            Ok(derivative_draw(system, f, &y, w.as_slice(), path, &probe_cfg)?.1)
        })?;
        continuity_probe.push(ProbeNode { r, mean_norm: norms.iter().sum::<f64>() / norms.len() as f64 });
    }
    let combined = lhs.uncertainty.hypot(rhs.uncertainty);
    let pass = !lhs.invalid && !rhs.invalid && (lhs.value - rhs.value).abs() <= 3.0 * combined;
    Ok(ConsistencyReport {
        lhs: lhs.value,
        rhs: rhs.value,
        se_lhs: lhs.uncertainty,
        se_rhs: rhs.uncertainty,
        pass,
        eps: opts.eps,
        lhs_estimate: lhs,
        rhs_estimate: rhs,
        ladder,
        richardson_slope,
        continuity_probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(paths: usize, t: f64, dt: f64) -> McConfig {
        McConfig::new(paths, t, dt, 11).unwrap()
    }

    #[test]
    fn constant_observable() {
        let sys = VectorFieldSystem::translation(2);
        let e = estimate_ptf(&sys, &ScalarObservable::constant(1.0), &[0.5, 0.5], &cfg(100, 1.0, 1e-2)).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn translation_square() {
        let sys = VectorFieldSystem::translation(1);
        let e = estimate_ptf(&sys, &ScalarObservable::square_norm(), &[0.5], &cfg(20_000, 1.0, 1e-1)).unwrap();
        assert!((e.value - 1.25).abs() <= 3.0 * e.uncertainty, "{e:?}");
    }

    #[test]
    fn ou_delta_pt_and_linearity() {
        let sys = VectorFieldSystem::ornstein_uhlenbeck(1);
        let f = ScalarObservable::coordinate(0);
        let c = cfg(50, 1.0, 1e-3);
        let one = estimate_delta_pt(&sys, &f, &[0.2], &[1.0], &c).unwrap();
        assert!((one.value - (-1f64).exp()).abs() <= 3.0 * one.uncertainty);
        let two = estimate_delta_pt(&sys, &f, &[0.2], &[2.0], &c).unwrap();
        assert_eq!(two.value, 2.0 * one.value);
        let zero = estimate_delta_pt(&sys, &f, &[0.2], &[0.0], &c).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn sine_on_translation() {
        let sys = VectorFieldSystem::translation(1);
        let f = ScalarObservable::sine(0);
        let x = 0.4;
        let r = gradient_consistency_check(&sys, &f, &[x], &[1.0], &cfg(4000, 1.0, 1e-2), &ConsistencyOptions::default()).unwrap();
        let exact = (-0.5f64).exp() * x.cos();
        assert!(r.pass, "{r:?}");
        assert!((r.rhs - exact).abs() <= 3.0 * r.se_rhs);
        assert_eq!(r.continuity_probe.len(), 5);
        assert!(r.continuity_probe.iter().all(|p| p.mean_norm == 1.0));
    }

    #[test]
    fn zero_vector_gives_zero_on_both_sides() {
        let sys = VectorFieldSystem::ornstein_uhlenbeck(1);
        let r = gradient_consistency_check(&sys, &ScalarObservable::coordinate(0), &[0.1], &[0.0], &cfg(10, 0.5, 1e-2), &ConsistencyOptions::default())
            .unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.rhs, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn expression_observable() {
        let f = ScalarObservable::from_expression("x^2 + sin(y)", 2).unwrap();
        assert_abs_diff_eq!(f.differential(&[1.0, 0.0], &[1.0, 1.0]), 3.0, epsilon = 1e-12);
        assert!(f.is_linear_at(&[0.3, 0.7], &[1.0, 0.0], &[0.2, -1.0], 1e-10));
        let g = ScalarObservable::new("cube", |x| x[0].powi(3));
        assert_abs_diff_eq!(g.differential(&[2.0], &[1.0]), 12.0, epsilon = 1e-6);
    }
}
