//! Monte Carlo estimators for moment functionals of the flow and its
//! derivative, with confidence intervals.
//!
//! Path `i` is always driven by stream `i` of the seeded generator and the
//! per-path results are reduced in path order, so estimates do not depend on
//! the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::criteria::{sup_hp_unit, HpBackend};
use crate::error::{FlowError, Result};
use crate::flow::{BrownianDriver, BrownianPath, Engine, FlowOptions, Frame, PathStatus, RadialState, Schedule};
use crate::geometry::{dist, CurvatureData, ModelKind};
use crate::systems::VectorFieldSystem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub paths: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub workers: usize,
    pub confidence: f64,
    /// Also run every path on the twice-coarser grid and report the
    /// difference as a discretization error.
    pub richardson: bool,
    pub options: FlowOptions,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            paths: 10_000,
            schedule: Schedule::new(1.0, 1e-3).expect("valid default schedule"),
            seed: 0,
            workers: 1,
            confidence: 0.95,
            richardson: true,
            options: FlowOptions::default(),
        }
    }
}

impl McConfig {
    pub fn new(paths: usize, t: f64, dt: f64, seed: u64) -> Result<Self> {
        Ok(McConfig { paths, schedule: Schedule::new(t, dt)?, seed, ..McConfig::default() })
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn without_richardson(mut self) -> Self {
        self.richardson = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(FlowError::Config("at least one path is required".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(FlowError::Config("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn z(&self) -> f64 {
        Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 * (1.0 + self.confidence))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub value: f64,
    /// Sample standard deviation over `√n`.
    pub se: f64,
    /// Discretization error (fine minus coarse grid) plus a rounding bound.
    pub numerical: f64,
    /// `hypot(se, numerical)`; the confidence interval uses this.
    pub uncertainty: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    pub n: usize,
    pub truncations: usize,
    pub seed: u64,
    /// Some paths were stopped at the explosion radius before the horizon.
    pub lower_bound_only: bool,
    /// No path contributed.
    pub invalid: bool,
    /// Natural log of `value`, reported when `value` is beyond `e^700`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_value: Option<f64>,
}

impl MomentEstimate {
    pub fn exact(value: f64, cfg: &McConfig) -> Self {
        MomentEstimate {
            value,
            se: 0.0,
            numerical: 0.0,
            uncertainty: 0.0,
            ci_low: value,
            ci_high: value,
            confidence: cfg.confidence,
            n: cfg.paths,
            truncations: 0,
            seed: cfg.seed,
            lower_bound_only: false,
            invalid: false,
            log_value: None,
        }
    }

    pub fn covers(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Scale {
    Linear,
    /// Per-path values are logarithms of positive quantities.
    Log,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `(mean, std, log mean)` of the positive values `e^{l_i}`.
fn log_mean_std(l: &[f64]) -> (f64, f64, f64) {
    let lmax = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lmax == f64::NEG_INFINITY {
        return (0.0, 0.0, f64::NEG_INFINITY);
    }
    if lmax == f64::INFINITY {
        return (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    }
    let w: Vec<f64> = l.iter().map(|a| (a - lmax).exp()).collect();
    let (m, s) = mean_std(&w);
    let s = lmax.exp() * s;
    (lmax.exp() * m, s, lmax + m.ln())
}

/// Per-path values, `NaN` marking paths excluded from the mean.
pub(crate) struct Draws {
    pub fine: Vec<f64>,
    pub coarse: Option<Vec<f64>>,
    pub truncations: usize,
}

pub(crate) fn summarize(d: &Draws, scale: Scale, cfg: &McConfig, lower_bound: bool) -> MomentEstimate {
    let fine: Vec<f64> = d.fine.iter().copied().filter(|a| !a.is_nan()).collect();
    let n = fine.len();
    if n == 0 || d.truncations >= d.fine.len() {
        return MomentEstimate {
            value: f64::NAN,
            se: f64::NAN,
            numerical: f64::NAN,
            uncertainty: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            confidence: cfg.confidence,
            n,
            truncations: d.truncations,
            seed: cfg.seed,
            lower_bound_only: true,
            invalid: true,
            log_value: None,
        };
    }
    let mean_of = |v: &[f64]| -> (f64, f64, f64) {
        match scale {
            Scale::Linear => {
                let (m, s) = mean_std(v);
                (m, s, m.abs().ln())
            }
            Scale::Log => log_mean_std(v),
        }
    };
    let (value, std, log_value) = mean_of(&fine);
    let se = std / (n as f64).sqrt();
    let richardson = d
        .coarse
        .as_ref()
        .map(|c| {
            let c: Vec<f64> = c.iter().copied().filter(|a| !a.is_nan()).collect();
            if c.is_empty() {
                0.0
            } else {
                (value - mean_of(&c).0).abs()
            }
        })
        .unwrap_or(0.0);
    let rounding = (n + cfg.schedule.steps()) as f64 * f64::EPSILON * value.abs();
    let numerical = if richardson.is_finite() { richardson + rounding } else { richardson };
    let uncertainty = se.hypot(numerical);
    let z = cfg.z();
    MomentEstimate {
        value,
        se,
        numerical,
        uncertainty,
        ci_low: value - z * uncertainty,
        ci_high: value + z * uncertainty,
        confidence: cfg.confidence,
        n,
        truncations: d.truncations,
        seed: cfg.seed,
        lower_bound_only: lower_bound && d.truncations > 0,
        invalid: false,
        log_value: (log_value > 700.0).then_some(log_value),
    }
}

/// Runs `f` on every path (and on its coarsening when Richardson is on),
/// in parallel, returning results in path order.
pub(crate) fn sample_paths<T, F>(cfg: &McConfig, noise_dim: usize, f: F) -> Result<(Vec<T>, Option<Vec<T>>)>
where
    T: Send,
    F: Fn(&BrownianPath) -> Result<T> + Sync,
{
    cfg.validate()?;
    let run = |coarse: bool| -> Result<Vec<T>> {
        (0..cfg.paths)
            .into_par_iter()
            .map(|i| {
                let path = BrownianDriver::new(cfg.seed, i as u64, noise_dim).path(&cfg.schedule);
                if coarse {
                    match path.coarsen() {
                        Some(c) => f(&c),
                        None => f(&path),
                    }
                } else {
                    f(&path)
                }
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| FlowError::Config(format!("cannot start workers: {e}")))?;
    pool.install(|| {
        let fine = run(false)?;
        let coarse = if cfg.richardson && cfg.schedule.coarsened().is_some() { Some(run(true)?) } else { None };
        Ok((fine, coarse))
    })
}

pub(crate) enum Tangent {
    None,
    Radial(RadialState),
    Frame(Frame),
}

impl Tangent {
    /// `ln |T_xF|` (operator norm for frames).
    fn log_norm(&self) -> f64 {
        match self {
            Tangent::None => f64::NAN,
            Tangent::Radial(st) => st.rho,
            Tangent::Frame(f) => f.log_operator_norm(),
        }
    }

    pub fn vector(&self) -> Option<Vec<f64>> {
        match self {
            Tangent::None => None,
            Tangent::Radial(st) => {
                let r = st.rho.exp();
                Some(st.u.iter().map(|a| a * r).collect())
            }
            Tangent::Frame(f) => {
                let s = f.log_scale.exp();
                Some(f.w.iter().map(|a| a * s).collect())
            }
        }
    }
}

/// Operator-norm tangent state at `x0`: log-radial in dimension one, a
/// renormalized tangent frame otherwise.
pub(crate) fn operator_tangent(system: &VectorFieldSystem, x0: &[f64]) -> Result<Tangent> {
    let basis = system.model().tangent_basis(x0)?;
    let k = basis.ncols();
    if k == 1 {
        let v: Vec<f64> = basis.column(0).iter().copied().collect();
        return Ok(Tangent::Radial(RadialState::new(&v).expect("unit basis vector")));
    }
    Ok(Tangent::Frame(Frame::new(basis.as_slice().to_vec(), k)))
}

/// Steps one path, calling `visit(step, x, tangent)` after the start and after
/// each step; `visit` returning `false` stops the walk early.
pub(crate) fn walk(
    system: &VectorFieldSystem,
    x0: &[f64],
    tangent: &mut Tangent,
    path: &BrownianPath,
    opts: &FlowOptions,
    mut visit: impl FnMut(usize, &[f64], &Tangent) -> bool,
) -> Result<PathStatus> {
    system.model().admissible(x0)?;
    if !matches!(tangent, Tangent::None) {
        system.require_jacobians()?;
    }
    let mut eng = Engine::new(system, *opts)?;
    let mut x = x0.to_vec();
    if !visit(0, &x, tangent) {
        return Ok(PathStatus::Alive);
    }
    for k in 0..path.steps() {
        let db = path.increment(k);
        let h = path.dt();
        let status = match tangent {
            Tangent::None => {
                eng.step(&mut x, &mut [], db, h);
                eng.status(&x, &[], k + 1)
            }
            Tangent::Radial(st) => {
                eng.step_radial(&mut x, st, db, h);
                eng.status(&x, &[st.rho], k + 1)
            }
            Tangent::Frame(f) => {
                eng.step(&mut x, &mut f.w, db, h);
                f.renormalize();
                eng.status(&x, &f.w, k + 1)
            }
        };
        if !status.is_alive() {
            return Ok(status);
        }
        if !visit(k + 1, &x, tangent) {
            break;
        }
    }
    Ok(PathStatus::Alive)
}

/// `ln` of the conformal factor of a rescaled metric; zero otherwise.
fn log_weight(system: &VectorFieldSystem, x: &[f64]) -> f64 {
    match system.model().kind() {
        ModelKind::RescaledFlat { weight, .. } => weight(x).ln(),
        _ => 0.0,
    }
}

/// Estimates per grid point and the largest of them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridEstimate {
    pub points: Vec<Vec<f64>>,
    pub per_point: Vec<MomentEstimate>,
    /// Index of the largest estimate; `sup` is a copy of it.
    pub argmax: usize,
    pub sup: MomentEstimate,
}

impl GridEstimate {
    fn from_estimates(points: &[Vec<f64>], per_point: Vec<MomentEstimate>) -> Result<Self> {
        if per_point.is_empty() {
            return Err(FlowError::Config("the grid is empty".into()));
        }
        let argmax = per_point
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.invalid)
            .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
            .map_or(0, |(i, _)| i);
        let sup = per_point[argmax].clone();
        Ok(GridEstimate { points: points.to_vec(), per_point, argmax, sup })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    /// `E sup_{s≤t} |T_xF_s|^p`.
    RunningSup,
    /// `E |T_xF_t|^p 1{t<ξ}`.
    Terminal,
}

/// `sup_{x∈K} E sup_{s≤t}|T_xF_s|^p`, or the terminal moment. Norms are
/// taken in the model's metric.
pub fn derivative_moment(
    system: &VectorFieldSystem,
    grid: &[Vec<f64>],
    p: f64,
    kind: MomentKind,
    cfg: &McConfig,
) -> Result<GridEstimate> {
    if !(p > 0.0) {
        return Err(FlowError::Config("p must be positive".into()));
    }
    let mut per_point = Vec::with_capacity(grid.len());
    for x0 in grid {
        system.model().admissible(x0)?;
        let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| {
            let mut tangent = operator_tangent(system, x0)?;
            let mut best = f64::NEG_INFINITY;
            let mut last = f64::NEG_INFINITY;
            let w0 = log_weight(system, x0);
            let status = walk(system, x0, &mut tangent, path, &cfg.options, |_, x, t| {
                last = t.log_norm() + log_weight(system, x) - w0;
                best = best.max(last);
                true
            })?;
            let alive = status.is_alive();
            let l = match kind {
                MomentKind::RunningSup => p * best,
                MomentKind::Terminal if alive => p * last,
                MomentKind::Terminal => f64::NEG_INFINITY,
            };
            Ok((l, !alive))
        })?;
        let truncations = fine.iter().filter(|a| a.1).count();
        let draws = Draws {
            fine: fine.iter().map(|a| a.0).collect(),
            coarse: coarse.map(|c| c.iter().map(|a| a.0).collect()),
            truncations,
        };
        per_point.push(summarize(&draws, Scale::Log, cfg, kind == MomentKind::RunningSup));
    }
    GridEstimate::from_estimates(grid, per_point)
}

pub fn sup_derivative_moment(system: &VectorFieldSystem, grid: &[Vec<f64>], p: f64, cfg: &McConfig) -> Result<GridEstimate> {
    derivative_moment(system, grid, p, MomentKind::RunningSup, cfg)
}

pub fn terminal_derivative_moment(system: &VectorFieldSystem, grid: &[Vec<f64>], p: f64, cfg: &McConfig) -> Result<GridEstimate> {
    derivative_moment(system, grid, p, MomentKind::Terminal, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoppedRung {
    pub radius: f64,
    /// `sup_{x∈K} E |T_xF_{S}| 1{S < t}` with `S` the first time the image
    /// of `K` leaves the ball of this radius.
    pub indicator: MomentEstimate,
    /// `sup_{x∈K} E |T_xF_{S∧t}|`.
    pub stopped: MomentEstimate,
    /// Fraction of paths with `S < t`.
    pub exit_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoppedMoments {
    pub center: Vec<f64>,
    pub rungs: Vec<StoppedRung>,
    /// Minimum of the indicator estimates over the three largest radii: a
    /// finite-ladder stand-in for the limit inferior in the radius.
    pub liminf_proxy: f64,
}

/// Doubling radii `r_0, 2r_0, …`.
pub fn radius_ladder(r0: f64, rungs: usize) -> Vec<f64> {
    (0..rungs).map(|j| r0 * 2f64.powi(j as i32)).collect()
}

/// Derivative moments stopped when the flow of the grid first leaves a ball.
pub fn stopped_moment(
    system: &VectorFieldSystem,
    grid: &[Vec<f64>],
    radii: &[f64],
    center: Option<&[f64]>,
    cfg: &McConfig,
) -> Result<StoppedMoments> {
    if grid.is_empty() || radii.is_empty() {
        return Err(FlowError::Config("grid and radius ladder must be nonempty".into()));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] <= 0.0 {
        return Err(FlowError::Config("radii must be positive and increasing".into()));
    }
    let center = center.map_or_else(|| vec![0.0; system.model().ambient_dim()], |c| c.to_vec());
    let j = radii.len();
    // per path: for every grid point, log|TF| along the path until the
    // largest radius is left
    let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| {
        let n = path.steps();
        let mut exit = vec![n; j];
        let mut logs: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
        let mut truncated = false;
        for x0 in grid {
            let mut tangent = operator_tangent(system, x0)?;
            let mut l = Vec::with_capacity(n + 1);
            let status = walk(system, x0, &mut tangent, path, &cfg.options, |k, x, t| {
                l.push(t.log_norm());
                let r = dist(x, &center);
                for (e, rad) in exit.iter_mut().zip(radii) {
                    if r >= *rad && k < *e {
                        *e = k;
                    }
                }
                true
            })?;
            if let Some(s) = status.stop_step() {
                truncated = true;
                for e in exit.iter_mut() {
                    *e = (*e).min(s);
                }
            }
            logs.push(l);
        }
        // S^K for each rung, then the stopped log norms per grid point
        let per_rung: Vec<Vec<(f64, f64)>> = exit
            .iter()
            .map(|&s| {
                logs.iter()
                    .map(|l| {
                        let at = l.get(s).or(l.last()).copied().unwrap_or(f64::NAN);
                        let ind = if s < n { at } else { f64::NEG_INFINITY };
                        (ind, at)
                    })
                    .collect()
            })
            .collect();
        Ok((per_rung, exit.iter().map(|&s| s < n).collect::<Vec<bool>>(), truncated))
    })?;
    let truncations = fine.iter().filter(|a| a.2).count();
    let mut rungs = Vec::with_capacity(j);
    for (r, &radius) in radii.iter().enumerate() {
        let column = |src: &Vec<(Vec<Vec<(f64, f64)>>, Vec<bool>, bool)>, g: usize, which: usize| -> Vec<f64> {
            src.iter().map(|a| if which == 0 { a.0[r][g].0 } else { a.0[r][g].1 }).collect()
        };
        let mut ind = Vec::with_capacity(grid.len());
        let mut stop = Vec::with_capacity(grid.len());
        for g in 0..grid.len() {
            for (which, out) in [(0, &mut ind), (1, &mut stop)] {
                let draws = Draws {
                    fine: column(&fine, g, which),
                    coarse: coarse.as_ref().map(|c| column(c, g, which)),
                    truncations,
                };
                out.push(summarize(&draws, Scale::Log, cfg, true));
            }
        }
        let exit_fraction = fine.iter().filter(|a| a.1[r]).count() as f64 / fine.len() as f64;
        rungs.push(StoppedRung {
            radius,
            indicator: GridEstimate::from_estimates(grid, ind)?.sup,
            stopped: GridEstimate::from_estimates(grid, stop)?.sup,
            exit_fraction,
        });
    }
    let tail = &rungs[rungs.len().saturating_sub(3)..];
    let liminf_proxy = tail.iter().map(|r| r.indicator.value).fold(f64::INFINITY, f64::min);
    Ok(StoppedMoments { center, rungs, liminf_proxy })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpFunctional {
    /// `E exp(θ ∫_0^t f(x_s) ds)`.
    pub estimate: MomentEstimate,
    /// `(1/t) ∫_0^t E exp(θ t f(x_s)) ds`, the Jensen upper bound.
    pub jensen: MomentEstimate,
    pub theta: f64,
}

impl ExpFunctional {
    /// `estimate − jensen` against three combined standard errors.
    pub fn ordered(&self) -> bool {
        let combined = self.estimate.uncertainty.hypot(self.jensen.uncertainty);
        self.estimate.value <= self.jensen.value + 3.0 * combined
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Left-endpoint Riemann sums of `f` along each path, exponentiated in log space.
pub fn exponential_functional(
    system: &VectorFieldSystem,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    x0: &[f64],
    theta: f64,
    cfg: &McConfig,
) -> Result<ExpFunctional> {
    if !(theta >= 0.0) {
        return Err(FlowError::Config("theta must be nonnegative".into()));
    }
    system.model().admissible(x0)?;
    let t = cfg.schedule.horizon();
    let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| {
        let n = path.steps();
        let h = path.dt();
        let mut integral = 0.0;
        let mut jensen_terms = Vec::with_capacity(n);
        let status = walk(system, x0, &mut Tangent::None, path, &cfg.options, |k, x, _| {
            if k < n {
                let fx = f(x);
                integral += fx * h;
                jensen_terms.push(theta * t * fx);
            }
            true
        })?;
        let lj = log_sum_exp(&jensen_terms) - (jensen_terms.len().max(1) as f64).ln();
        Ok((theta * integral, lj, !status.is_alive()))
    })?;
    let truncations = fine.iter().filter(|a| a.2).count();
    let pick = |v: &Vec<(f64, f64, bool)>, j: bool| -> Vec<f64> { v.iter().map(|a| if j { a.1 } else { a.0 }).collect() };
    let est = Draws { fine: pick(&fine, false), coarse: coarse.as_ref().map(|c| pick(c, false)), truncations };
    let jen = Draws { fine: pick(&fine, true), coarse: coarse.as_ref().map(|c| pick(c, true)), truncations };
    Ok(ExpFunctional {
        estimate: summarize(&est, Scale::Log, cfg, true),
        jensen: summarize(&jen, Scale::Log, cfg, true),
        theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitProbability {
    pub level: f64,
    /// `P(T_n < t)` with `T_n` the first time `r(x_s) ≥ n`.
    pub probability: MomentEstimate,
    /// `(1+r(x_0))^p e^{k_0(1+p²)t} / n^p`, when `k_0` was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadialMoment {
    pub pole: Vec<f64>,
    pub r0: f64,
    pub p: f64,
    /// `E (1 + r(x_t))^p` over paths alive at `t`.
    pub moment: MomentEstimate,
    /// `(1+r(x_0))^p e^{k_0(1+p²)t}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub within_bound: Option<bool>,
    pub exits: Vec<ExitProbability>,
}

#[allow(clippy::too_many_arguments)]
pub fn radial_moment(
    system: &VectorFieldSystem,
    curvature: &CurvatureData,
    x0: &[f64],
    p: f64,
    levels: &[f64],
    k0: Option<f64>,
    cfg: &McConfig,
) -> Result<RadialMoment> {
    let model = system.model();
    let pole = curvature.pole.clone().ok_or_else(|| FlowError::Capability("radial moments need a pole".into()))?;
    let r_of = |x: &[f64]| -> Result<f64> {
        match model.pole_distance(curvature, x) {
            Ok(d) => Ok(d.r),
            Err(FlowError::Singular(_)) => Ok(0.0),
            Err(e) => Err(e),
        }
    };
    let r0 = r_of(x0)?;
    let n = cfg.schedule.steps();
    let (fine, coarse) = sample_paths(cfg, system.noise_dim(), |path| {
        let mut first = vec![n + 1; levels.len()];
        let mut r_last = r0;
        let mut err = None;
        let status = walk(system, x0, &mut Tangent::None, path, &cfg.options, |k, x, _| {
            match r_of(x) {
                Ok(r) => {
                    r_last = r;
                    for (f, lvl) in first.iter_mut().zip(levels) {
                        if r >= *lvl && *f > k {
                            *f = k;
                        }
                    }
                }
                Err(e) => err = Some(e),
            }
            err.is_none()
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(s) = status.stop_step() {
            first.iter_mut().for_each(|f| *f = (*f).min(s));
        }
        let m = if status.is_alive() { p * r_last.ln_1p() } else { f64::NAN };
        Ok((m, first.iter().map(|&f| if f <= n { 1.0 } else { 0.0 }).collect::<Vec<f64>>(), !status.is_alive()))
    })?;
    let truncations = fine.iter().filter(|a| a.2).count();
    let pick = |v: &Vec<(f64, Vec<f64>, bool)>| -> Vec<f64> { v.iter().map(|a| a.0).collect() };
    let moment = summarize(&Draws { fine: pick(&fine), coarse: coarse.as_ref().map(pick), truncations }, Scale::Log, cfg, false);
    let t = cfg.schedule.horizon();
    let bound = k0.map(|k| (1.0 + r0).powf(p) * (k * (1.0 + p * p) * t).exp());
    let exits = levels
        .iter()
        .enumerate()
        .map(|(j, &level)| {
            let col = |v: &Vec<(f64, Vec<f64>, bool)>| -> Vec<f64> { v.iter().map(|a| a.1[j]).collect() };
            ExitProbability {
                level,
                probability: summarize(&Draws { fine: col(&fine), coarse: coarse.as_ref().map(col), truncations: 0 }, Scale::Linear, cfg, false),
                bound: bound.map(|b| b / level.powf(p)),
            }
        })
        .collect();
    let within_bound = bound.map(|b| moment.value <= b + 3.0 * moment.uncertainty);
    Ok(RadialMoment { pole, r0, p, moment, bound, within_bound, exits })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExponentPoint {
    pub t: f64,
    /// `ln sup_K E|T_xF_t|^p`.
    pub log_moment: f64,
    pub residual: f64,
    pub estimate: MomentEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExponentFit {
    pub p: f64,
    /// Least-squares slope of `ln sup_K E|T_xF_t|^p` in `t`.
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the regression residuals.
    pub slope_se: f64,
    pub points: Vec<ExponentPoint>,
    /// Horizons dropped because the moment estimate was not positive.
    pub excluded: Vec<f64>,
}

/// One set of paths to the largest horizon, read off at every horizon.
pub fn moment_exponent(
    system: &VectorFieldSystem,
    grid: &[Vec<f64>],
    p: f64,
    horizons: &[f64],
    cfg: &McConfig,
) -> Result<ExponentFit> {
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(FlowError::Config("horizons must be positive and increasing".into()));
    }
    if !(p > 0.0) {
        return Err(FlowError::Config("p must be positive".into()));
    }
    let dt = cfg.schedule.dt();
    let last = *horizons.last().expect("nonempty");
    let schedule = Schedule::new(last, dt)?;
    let idx: Vec<usize> = horizons.iter().map(|t| ((t / dt).round() as usize).min(schedule.steps())).collect();
    let run_cfg = McConfig { schedule, ..cfg.clone() };
    let mut per_h: Vec<Vec<MomentEstimate>> = vec![Vec::new(); horizons.len()];
    for x0 in grid {
        let (fine, coarse) = sample_paths(&run_cfg, system.noise_dim(), |path| {
            let scale = path.steps() as f64 / run_cfg.schedule.steps() as f64;
            let wanted: Vec<usize> = idx.iter().map(|&i| (i as f64 * scale).round() as usize).collect();
            let mut tangent = operator_tangent(system, x0)?;
            let mut out = vec![f64::NEG_INFINITY; wanted.len()];
            let status = walk(system, x0, &mut tangent, path, &run_cfg.options, |k, _, t| {
                for (o, &w) in out.iter_mut().zip(&wanted) {
                    if w == k {
                        *o = p * t.log_norm();
                    }
                }
                true
            })?;
            Ok((out, !status.is_alive()))
        })?;
        let truncations = fine.iter().filter(|a| a.1).count();
        for (h, slot) in per_h.iter_mut().enumerate() {
            let col = |v: &Vec<(Vec<f64>, bool)>| -> Vec<f64> { v.iter().map(|a| a.0[h]).collect() };
            slot.push(summarize(&Draws { fine: col(&fine), coarse: coarse.as_ref().map(col), truncations }, Scale::Log, &run_cfg, false));
        }
    }
    let mut pts = Vec::new();
    let mut excluded = Vec::new();
    for (h, ests) in per_h.into_iter().enumerate() {
        let g = GridEstimate::from_estimates(grid, ests)?;
        let est = g.sup;
        if est.invalid || !(est.value > 0.0) {
            excluded.push(horizons[h]);
            continue;
        }
        let lm = est.log_value.unwrap_or_else(|| est.value.ln());
        pts.push((horizons[h], lm, est));
    }
    if pts.len() < 2 {
        return Err(FlowError::Config("fewer than two horizons gave a positive moment".into()));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|a| a.0).sum::<f64>() / n;
    let ym = pts.iter().map(|a| a.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|a| (a.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|a| (a.0 - tm) * (a.1 - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let points: Vec<ExponentPoint> = pts
        .into_iter()
        .map(|(t, y, estimate)| ExponentPoint { t, log_moment: y, residual: y - (intercept + slope * t), estimate })
        .collect();
    let sse: f64 = points.iter().map(|q| q.residual * q.residual).sum();
    let slope_se = if points.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(ExponentFit { p, slope, intercept, slope_se, points, excluded })
}

/// `sup_{x∈K} E exp(½ ∫_0^T f(F_s(x)) ds)` with `f = sup_{|v|=1} H_1`.
pub fn girsanov_one_completeness(
    system: &VectorFieldSystem,
    grid: &[Vec<f64>],
    directions: usize,
    cfg: &McConfig,
) -> Result<GridEstimate> {
    if system.gradient_embedding().is_none() {
        return Err(FlowError::Capability("needs a gradient Brownian system".into()));
    }
    let f = |x: &[f64]| sup_hp_unit(system, None, x, 1.0, HpBackend::Gauss, directions).unwrap_or(f64::NAN);
    let mut per_point = Vec::with_capacity(grid.len());
    for x0 in grid {
        per_point.push(exponential_functional(system, &f, x0, 0.5, cfg)?.estimate);
    }
    GridEstimate::from_estimates(grid, per_point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Embedding, ManifoldModel};
    use crate::systems::gradient_brownian_from_embedding;
    use approx::assert_abs_diff_eq;

    fn cfg(paths: usize, t: f64, dt: f64) -> McConfig {
        McConfig::new(paths, t, dt, 7).unwrap()
    }

    #[test]
    fn translation_moments_are_one() {
        let sys = VectorFieldSystem::translation(2);
        let g = sup_derivative_moment(&sys, &[vec![0.0, 0.0], vec![1.0, -1.0]], 3.0, &cfg(50, 1.0, 1e-2)).unwrap();
        assert_eq!(g.sup.value, 1.0);
        assert_eq!(g.sup.se, 0.0);
    }

    #[test]
    fn ou_terminal_and_sup() {
        let sys = VectorFieldSystem::ornstein_uhlenbeck(1);
        let c = cfg(100, 1.0, 1e-3);
        let term = terminal_derivative_moment(&sys, &[vec![0.3]], 1.0, &c).unwrap().sup;
        assert_abs_diff_eq!(term.value, (-1f64).exp(), epsilon = 1e-6);
        assert!(term.covers((-1f64).exp()));
        let sup = sup_derivative_moment(&sys, &[vec![0.3]], 1.0, &c).unwrap().sup;
        assert_eq!(sup.value, 1.0);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let sys = VectorFieldSystem::ornstein_uhlenbeck(1);
        let f = |x: &[f64]| x[0] * x[0];
        let a = exponential_functional(&sys, &f, &[0.5], 0.3, &cfg(64, 0.5, 1e-2)).unwrap();
        let b = exponential_functional(&sys, &f, &[0.5], 0.3, &cfg(64, 0.5, 1e-2).with_workers(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_and_zero_exponents() {
        let sys = VectorFieldSystem::translation(1);
        let c = cfg(20, 1.0, 1e-2);
        let e = exponential_functional(&sys, &|_| 2.0, &[0.0], 0.5, &c).unwrap();
        assert_abs_diff_eq!(e.estimate.value, 1f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(e.jensen.value, 1f64.exp(), epsilon = 1e-12);
        let z = exponential_functional(&sys, &|x| x[0].sin(), &[0.0], 0.0, &c).unwrap();
        assert_eq!(z.estimate.value, 1.0);
    }

    #[test]
    fn huge_exponents_switch_to_log_space() {
        let sys = VectorFieldSystem::translation(1);
        let e = exponential_functional(&sys, &|_| 1000.0, &[0.0], 1.0, &cfg(10, 1.0, 1e-2)).unwrap();
        assert_abs_diff_eq!(e.estimate.log_value.unwrap(), 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn exponent_regression_for_ou() {
        let sys = VectorFieldSystem::ornstein_uhlenbeck(1);
        let fit = moment_exponent(&sys, &[vec![0.0]], 2.0, &[1.0, 2.0, 3.0], &cfg(20, 1.0, 1e-2)).unwrap();
        assert_abs_diff_eq!(fit.slope, -2.0, epsilon = 1e-3);
        let tr = moment_exponent(&VectorFieldSystem::translation(2), &[vec![0.0, 0.0]], 1.0, &[1.0, 2.0], &cfg(5, 1.0, 1e-2)).unwrap();
        assert_eq!(tr.slope, 0.0);
    }

    #[test]
    fn stopped_translation_is_exit_probability() {
        let sys = VectorFieldSystem::translation(1);
        let s = stopped_moment(&sys, &[vec![0.0]], &[0.5, 1.0, 2.0], None, &cfg(400, 1.0, 1e-2)).unwrap();
        for r in &s.rungs {
            assert_abs_diff_eq!(r.indicator.value, r.exit_fraction, epsilon = 1e-12);
            assert_eq!(r.stopped.value, 1.0);
        }
        assert!(s.rungs.windows(2).all(|w| w[1].indicator.value <= w[0].indicator.value));
    }

    #[test]
    fn zero_system_radial_moment_is_exact() {
        let sys = VectorFieldSystem::zero(2);
        let curv = CurvatureData::flat(2);
        let r = radial_moment(&sys, &curv, &[3.0, 4.0], 2.0, &[6.0, 10.0], Some(0.0), &cfg(10, 1.0, 1e-2)).unwrap();
        assert_eq!(r.moment.value, 36.0);
        assert!(r.exits.iter().all(|e| e.probability.value == 0.0));
    }

    #[test]
    fn sphere_girsanov_functional() {
        let model = ManifoldModel::embedded(Embedding::sphere(3));
        let sys = gradient_brownian_from_embedding(&model, None).unwrap();
        let g = girsanov_one_completeness(&sys, &[vec![0.0, 0.0, 1.0]], 4, &cfg(8, 1.0, 1e-2)).unwrap();
        assert_abs_diff_eq!(g.sup.value, (-0.5f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn invalid_when_everything_explodes() {
        let sys = VectorFieldSystem::translation(1);
        let mut c = cfg(5, 1.0, 1e-2);
        c.options.explosion_radius = 1e-12;
        let g = terminal_derivative_moment(&sys, &[vec![1.0]], 1.0, &c).unwrap();
        assert!(g.sup.invalid);
        assert_eq!(g.sup.truncations, 5);
    }
}
