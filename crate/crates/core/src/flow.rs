//! Time stepping of the flow `F_t(x)` and of the derivative flow `T_xF_t(v)`
//! under common noise.
//!
//! The scheme is the Stratonovich Heun predictor-corrector. The derivative
//! flow is stepped with the exact derivative of the numerical map, so the
//! pair `(x, v)` is chain-rule consistent and `v` is linear in `v_0` bit for bit.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::geometry::{dist, dot, norm, Embedding, EmbeddingKind, ModelKind};
use crate::systems::VectorFieldSystem;

/// Uniform step grid on `[0, t]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    dt: f64,
    steps: usize,
}

impl Schedule {
    pub fn new(t: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FlowError::Config(format!("step size must be positive, got {dt}")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(FlowError::Config(format!("horizon must be positive, got {t}")));
        }
        let steps = (t / dt).round();
        if steps < 1.0 || (steps * dt - t).abs() > 1e-9 * t {
            return Err(FlowError::Config(format!("horizon {t} is not a multiple of dt {dt}")));
        }
        Ok(Schedule { dt, steps: steps as usize })
    }

    pub fn with_steps(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || steps == 0 {
            return Err(FlowError::Config("need dt > 0 and at least one step".into()));
        }
        Ok(Schedule { dt, steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.dt * step as f64
    }

    /// Twice the step size on the same interval, if the step count is even.
    pub fn coarsened(&self) -> Option<Schedule> {
        (self.steps.is_multiple_of(2) && self.steps >= 2).then_some(Schedule { dt: 2.0 * self.dt, steps: self.steps / 2 })
    }
}

/// Reproducible source of Brownian increments: ChaCha8 seeded with `seed`,
/// one stream per sample path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrownianDriver {
    pub seed: u64,
    pub stream: u64,
    pub dim: usize,
}

impl BrownianDriver {
    pub fn new(seed: u64, stream: u64, dim: usize) -> Self {
        BrownianDriver { seed, stream, dim }
    }

    pub fn path(&self, schedule: &Schedule) -> BrownianPath {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        let sd = schedule.dt.sqrt();
        let increments = (0..schedule.steps * self.dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sd
            })
            .collect();
        BrownianPath { dt: schedule.dt, dim: self.dim, increments }
    }
}

/// Increments `ΔB_k` of one Brownian realization, step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    dt: f64,
    dim: usize,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn zero(dim: usize, schedule: &Schedule) -> Self {
        BrownianPath { dt: schedule.dt, dim, increments: vec![0.0; dim * schedule.steps] }
    }

    pub fn from_increments(dim: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if dim == 0 || !increments.len().is_multiple_of(dim) || increments.is_empty() {
            return Err(FlowError::Contract("increment buffer does not match the dimension".into()));
        }
        Ok(BrownianPath { dt, dim, increments })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { dt: self.dt, steps: self.steps() }
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// `B` at step `k`.
    pub fn value_at(&self, k: usize) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        for j in 0..k {
            for (bi, di) in b.iter_mut().zip(self.increment(j)) {
                *bi += di;
            }
        }
        b
    }

    /// The same realization on the grid with twice the step.
    pub fn coarsen(&self) -> Option<BrownianPath> {
        let n = self.steps();
        if !n.is_multiple_of(2) || n < 2 {
            return None;
        }
        let mut inc = Vec::with_capacity(self.increments.len() / 2);
        for k in 0..n / 2 {
            let (a, b) = (self.increment(2 * k), self.increment(2 * k + 1));
            inc.extend(a.iter().zip(b).map(|(x, y)| x + y));
        }
        Some(BrownianPath { dt: 2.0 * self.dt, dim: self.dim, increments: inc })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    /// Explosion is declared once `|x|` exceeds this radius.
    pub explosion_radius: f64,
    /// Distance to a puncture that counts as leaving the domain.
    pub puncture_eps: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { explosion_radius: 1e6, puncture_eps: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PathStatus {
    Alive,
    Exploded { step: usize },
    DomainExit { step: usize },
}

impl PathStatus {
    pub fn is_alive(&self) -> bool {
        matches!(self, PathStatus::Alive)
    }

    /// Step at which the path stopped (the numerical explosion time).
    pub fn stop_step(&self) -> Option<usize> {
        match *self {
            PathStatus::Alive => None,
            PathStatus::Exploded { step } | PathStatus::DomainExit { step } => Some(step),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    Direct,
    LogRadial,
}

/// State of the log-radial derivative integration: `v = e^ρ u`, `|u| = 1`.
#[derive(Clone, Debug)]
pub(crate) struct RadialState {
    pub rho: f64,
    pub u: Vec<f64>,
    /// Itô martingale part `M_t = Σ ⟨u, ∇X^i u⟩ dB^i`.
    pub martingale: f64,
    pub quad_var: f64,
}

impl RadialState {
    pub fn new(v: &[f64]) -> Option<Self> {
        let n = norm(v);
        (n > 0.0 && n.is_finite()).then(|| RadialState {
            rho: n.ln(),
            u: v.iter().map(|a| a / n).collect(),
            martingale: 0.0,
            quad_var: 0.0,
        })
    }

    /// Bounded-variation part, from `ρ_t − ρ_0 = M_t − ½⟨M⟩_t + a_t`.
    pub fn drift_part(&self, rho0: f64) -> f64 {
        self.rho - rho0 - self.martingale + 0.5 * self.quad_var
    }
}

/// A set of tangent vectors carried by the derivative flow with a common
/// logarithmic scale: the frame is `e^{log_scale} W`.
#[derive(Clone, Debug)]
pub(crate) struct Frame {
    pub w: Vec<f64>,
    pub k: usize,
    pub log_scale: f64,
}

impl Frame {
    pub fn new(w: Vec<f64>, k: usize) -> Self {
        Frame { w, k, log_scale: 0.0 }
    }

    pub fn renormalize(&mut self) {
        let d = self.w.len() / self.k.max(1);
        let s = (0..self.k).map(|j| norm(&self.w[j * d..(j + 1) * d])).fold(0.0, f64::max);
        if s > 0.0 && s.is_finite() && !(1e-50..=1e50).contains(&s) {
            self.w.iter_mut().for_each(|a| *a /= s);
            self.log_scale += s.ln();
        }
    }

    /// `ln` of the largest singular value of the frame.
    pub fn log_operator_norm(&self) -> f64 {
        let d = self.w.len() / self.k;
        let sigma = match self.k {
            1 => norm(&self.w),
            2 => {
                let (a, b) = (&self.w[..d], &self.w[d..]);
                let (p, q, r) = (dot(a, a), dot(a, b), dot(b, b));
                let h = 0.5 * (p - r);
                (0.5 * (p + r) + (h * h + q * q).sqrt()).sqrt()
            }
            k => {
                let w = DMatrix::from_column_slice(d, k, &self.w);
                let g = w.transpose() * w;
                SymmetricEigen::new(g).eigenvalues.max().max(0.0).sqrt()
            }
        };
        sigma.ln() + self.log_scale
    }
}

/// Heun stepper with scratch buffers; one per worker.
pub(crate) struct Engine<'a> {
    sys: &'a VectorFieldSystem,
    opts: FlowOptions,
    d: usize,
    m: usize,
    puncture: Option<Vec<f64>>,
    embedding: Option<Arc<Embedding>>,
    sphere: bool,
    xc: Vec<f64>,
    a: Vec<f64>,
    xt: Vec<f64>,
    xct: Vec<f64>,
    at: Vec<f64>,
    jac: Vec<f64>,
    ja: Vec<f64>,
    dv0: Vec<f64>,
    vt: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(sys: &'a VectorFieldSystem, opts: FlowOptions) -> Result<Self> {
        sys.require_stratonovich()?;
        let (d, m) = (sys.dim(), sys.noise_dim());
        let puncture = match sys.model().kind() {
            ModelKind::PuncturedFlat { puncture } => Some(puncture.clone()),
            _ => None,
        };
        let embedding = sys.model().embedding().cloned();
        let sphere = embedding.as_ref().is_some_and(|e| e.kind() == EmbeddingKind::Sphere);
        Ok(Engine {
            sys,
            opts,
            d,
            m,
            puncture,
            embedding,
            sphere,
            xc: vec![0.0; d * m],
            a: vec![0.0; d],
            xt: vec![0.0; d],
            xct: vec![0.0; d * m],
            at: vec![0.0; d],
            jac: vec![0.0; d * m],
            ja: vec![0.0; d],
            dv0: vec![0.0; d],
            vt: vec![0.0; d],
            g: vec![0.0; d * m],
        })
    }

    fn predict(&mut self, x: &[f64], db: &[f64], h: f64) {
        let (d, m) = (self.d, self.m);
        self.sys.diffusion(x, &mut self.xc);
        self.sys.drift(x, &mut self.a);
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..m {
                s += self.xc[i * d + k] * db[i];
            }
            self.xt[k] = x[k] + (s + self.a[k] * h);
        }
        self.sys.diffusion(&self.xt, &mut self.xct);
        self.sys.drift(&self.xt, &mut self.at);
    }

    fn correct(&self, x: &mut [f64], db: &[f64], h: f64) {
        let (d, m) = (self.d, self.m);
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..m {
                s += (self.xc[i * d + k] + self.xct[i * d + k]) * db[i];
            }
            x[k] += 0.5 * (s + (self.a[k] + self.at[k]) * h);
        }
    }

    /// `out = Σ DX^i(y)v dB^i + DA(y)v h`.
    fn linearized_increment(&mut self, y: &[f64], v: &[f64], db: &[f64], h: f64, out_is_dv0: bool) {
        let (d, m) = (self.d, self.m);
        self.sys.diffusion_jacobian(y, v, &mut self.jac);
        self.sys.drift_jacobian(y, v, &mut self.ja);
        let out = if out_is_dv0 { &mut self.dv0 } else { &mut self.g[..d] };
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..m {
                s += self.jac[i * d + k] * db[i];
            }
            out[k] = s + self.ja[k] * h;
        }
    }

    /// One step of `x` and of every vector in `frames` (`k` vectors of length `d`).
    pub fn step(&mut self, x: &mut [f64], frames: &mut [f64], db: &[f64], h: f64) {
        let d = self.d;
        self.predict(x, db, h);
        let k = frames.len() / d;
        for j in 0..k {
            let v = &mut frames[j * d..(j + 1) * d];
            self.linearized_increment(x, v, db, h, true);
            for c in 0..d {
                self.vt[c] = v[c] + self.dv0[c];
            }
            let xt = std::mem::take(&mut self.xt);
            let vt = std::mem::take(&mut self.vt);
            self.linearized_increment(&xt, &vt, db, h, false);
            self.xt = xt;
            self.vt = vt;
            for c in 0..d {
                v[c] += 0.5 * (self.dv0[c] + self.g[c]);
            }
        }
        self.correct(x, db, h);
        if self.embedding.is_some() {
            self.retract(x);
            for j in 0..k {
                self.project(x, &mut frames[j * d..(j + 1) * d]);
            }
        }
    }

    /// One step of `x` and of the log-radial pair `(ρ, u)`.
    pub fn step_radial(&mut self, x: &mut [f64], st: &mut RadialState, db: &[f64], h: f64) {
        let d = self.d;
        self.predict(x, db, h);
        let mut du0 = vec![0.0; d];
        let (drho0, mart, qv) = self.radial_increment(x, &st.u, db, h, &mut du0);
        st.martingale += mart;
        st.quad_var += qv;
        let ut: Vec<f64> = st.u.iter().zip(&du0).map(|(a, b)| a + b).collect();
        let mut du1 = vec![0.0; d];
        let xt = std::mem::take(&mut self.xt);
        let (drho1, _, _) = self.radial_increment(&xt, &ut, db, h, &mut du1);
        self.xt = xt;
        st.rho += 0.5 * (drho0 + drho1);
        for c in 0..d {
            st.u[c] += 0.5 * (du0[c] + du1[c]);
        }
        self.correct(x, db, h);
        if self.embedding.is_some() {
            self.retract(x);
            self.project(x, &mut st.u);
        }
        let n = norm(&st.u);
        st.u.iter_mut().for_each(|a| *a /= n);
    }

    /// Writes `du` and returns `dρ` with the Itô martingale increment and
    /// its quadratic variation, evaluated at the given point.
    fn radial_increment(
        &mut self,
        y: &[f64],
        u: &[f64],
        db: &[f64],
        h: f64,
        du: &mut [f64],
    ) -> (f64, f64, f64) {
        let (d, m) = (self.d, self.m);
        let uu = dot(u, u);
        self.sys.diffusion_jacobian(y, u, &mut self.jac);
        self.sys.drift_jacobian(y, u, &mut self.ja);
        if self.embedding.is_some() {
            // the normal part of DX^i u does not contribute to ⟨u, ·⟩ but
            // must be removed from du
            for i in 0..m {
                let mut col = self.jac[i * d..(i + 1) * d].to_vec();
                self.project(y, &mut col);
                self.jac[i * d..(i + 1) * d].copy_from_slice(&col);
            }
            let mut ja = self.ja.clone();
            self.project(y, &mut ja);
            self.ja.copy_from_slice(&ja);
        }
        let mut drho = 0.0;
        let mut mart = 0.0;
        let mut qv = 0.0;
        du.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..m {
            let col = &self.jac[i * d..(i + 1) * d];
            let b = dot(u, col) / uu;
            drho += b * db[i];
            mart += b * db[i];
            qv += b * b * h;
            for c in 0..d {
                du[c] += (col[c] - b * u[c]) * db[i];
            }
        }
        let ca = dot(u, &self.ja) / uu;
        drho += ca * h;
        for c in 0..d {
            du[c] += (self.ja[c] - ca * u[c]) * h;
        }
        (drho, mart, qv)
    }

    fn retract(&self, x: &mut [f64]) {
        if self.sphere {
            let n = norm(x);
            x.iter_mut().for_each(|a| *a /= n);
        } else if let Some(e) = &self.embedding {
            if e.retract(x).is_err() {
                x.iter_mut().for_each(|a| *a = f64::NAN);
            }
        }
    }

    fn project(&self, x: &[f64], v: &mut [f64]) {
        if self.sphere {
            let c = dot(x, v) / dot(x, x);
            v.iter_mut().zip(x).for_each(|(a, b)| *a -= c * b);
        } else if let Some(e) = &self.embedding {
            match e.tangent_projection(x) {
                Ok(p) => {
                    let w = p * nalgebra::DVector::from_column_slice(v);
                    v.copy_from_slice(w.as_slice());
                }
                Err(_) => v.iter_mut().for_each(|a| *a = f64::NAN),
            }
        }
    }

    /// Explosion and domain checks after step `step`.
    pub fn status(&self, x: &[f64], frames: &[f64], step: usize) -> PathStatus {
        if x.iter().chain(frames).any(|a| !a.is_finite()) || norm(x) > self.opts.explosion_radius {
            return PathStatus::Exploded { step };
        }
        if let Some(p) = &self.puncture {
            if dist(x, p) <= self.opts.puncture_eps {
                return PathStatus::DomainExit { step };
            }
        }
        PathStatus::Alive
    }
}

/// Solution path of the flow from one initial point.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub status: PathStatus,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has the initial state")
    }
}

/// Itô decomposition `log|v_t| − log|v_0| = M_t − ½⟨M⟩_t + a_t` along a path.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialDiagnostics {
    pub martingale: Vec<f64>,
    pub quadratic_variation: Vec<f64>,
    pub drift_part: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeTrajectory {
    pub dt: f64,
    pub mode: DerivativeMode,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub log_norm: Vec<f64>,
    pub radial: Option<RadialDiagnostics>,
    pub status: PathStatus,
}

fn check_start(system: &VectorFieldSystem, x0: &[f64], path: &BrownianPath) -> Result<()> {
    system.model().admissible(x0)?;
    if path.dim() != system.noise_dim() {
        return Err(FlowError::Contract(format!(
            "driver has dimension {} but the system has {} noise components",
            path.dim(),
            system.noise_dim()
        )));
    }
    Ok(())
}

/// Integrates `dx = X(x)∘dB + A(x)dt` along one Brownian path.
pub fn integrate_flow(
    system: &VectorFieldSystem,
    x0: &[f64],
    path: &BrownianPath,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    check_start(system, x0, path)?;
    let mut eng = Engine::new(system, *opts)?;
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(path.steps() + 1);
    states.push(x.clone());
    let mut status = PathStatus::Alive;
    for k in 0..path.steps() {
        eng.step(&mut x, &mut [], path.increment(k), path.dt());
        status = eng.status(&x, &[], k + 1);
        if !status.is_alive() {
            break;
        }
        states.push(x.clone());
    }
    Ok(Trajectory { dt: path.dt(), states, status })
}

/// Integrates the pair `(x_t, v_t)` with `v_t = T_{x_0}F_t(v_0)`.
pub fn integrate_derivative_flow(
    system: &VectorFieldSystem,
    x0: &[f64],
    v0: &[f64],
    path: &BrownianPath,
    mode: DerivativeMode,
    opts: &FlowOptions,
) -> Result<DerivativeTrajectory> {
    check_start(system, x0, path)?;
    if v0.len() != system.dim() {
        return Err(FlowError::Contract("v0 has the wrong length".into()));
    }
    if !system.model().is_tangent(x0, v0)? {
        return Err(FlowError::Contract("v0 is not tangent at x0".into()));
    }
    system.require_jacobians()?;
    let mut eng = Engine::new(system, *opts)?;
    let steps = path.steps();
    let mut x = x0.to_vec();
    let mut xs = vec![x.clone()];
    let mut vs = vec![v0.to_vec()];
    let v0_norm = norm(v0);
    let mut logs = vec![v0_norm.ln()];
    let mut status = PathStatus::Alive;
    let radial_start = RadialState::new(v0);
    let zero = radial_start.is_none();
    match (mode, radial_start) {
        (DerivativeMode::LogRadial, Some(mut st)) => {
            let rho0 = st.rho;
            let mut diag = RadialDiagnostics {
                martingale: vec![0.0],
                quadratic_variation: vec![0.0],
                drift_part: vec![0.0],
            };
            for k in 0..steps {
                eng.step_radial(&mut x, &mut st, path.increment(k), path.dt());
                status = eng.status(&x, &[st.rho], k + 1);
                if !status.is_alive() {
                    break;
                }
                let r = st.rho.exp();
                xs.push(x.clone());
                vs.push(st.u.iter().map(|a| a * r).collect());
                logs.push(st.rho);
                diag.martingale.push(st.martingale);
                diag.quadratic_variation.push(st.quad_var);
                diag.drift_part.push(st.drift_part(rho0));
            }
            Ok(DerivativeTrajectory { dt: path.dt(), mode, x: xs, v: vs, log_norm: logs, radial: Some(diag), status })
        }
        _ => {
            let mut v = v0.to_vec();
            for k in 0..steps {
                if zero {
                    eng.step(&mut x, &mut [], path.increment(k), path.dt());
                } else {
                    eng.step(&mut x, &mut v, path.increment(k), path.dt());
                }
                status = eng.status(&x, &v, k + 1);
                if !status.is_alive() {
                    break;
                }
                let n = norm(&v);
                if !zero && n < 1e-300 {
                    return Err(FlowError::Underflow { step: k + 1 });
                }
                xs.push(x.clone());
                vs.push(v.clone());
                logs.push(n.ln());
            }
            Ok(DerivativeTrajectory { dt: path.dt(), mode, x: xs, v: vs, log_norm: logs, radial: None, status })
        }
    }
}

/// Many initial points (optionally with tangent vectors) moved by one
/// Brownian realization.
#[derive(Clone, Debug)]
pub struct FlowEnsemble {
    dt: f64,
    steps: usize,
    states: Vec<Vec<Vec<f64>>>,
    frames: Option<Vec<Vec<Vec<f64>>>>,
    status: Vec<PathStatus>,
}

impl FlowEnsemble {
    pub fn simulate(
        system: &VectorFieldSystem,
        points: &[Vec<f64>],
        frames: Option<&[Vec<f64>]>,
        path: &BrownianPath,
        opts: &FlowOptions,
    ) -> Result<Self> {
        if let Some(f) = frames {
            if f.len() != points.len() {
                return Err(FlowError::Contract("one tangent vector per point is required".into()));
            }
            system.require_jacobians()?;
        }
        let mut eng = Engine::new(system, *opts)?;
        let mut states = Vec::with_capacity(points.len());
        let mut vframes = frames.map(|_| Vec::with_capacity(points.len()));
        let mut status = Vec::with_capacity(points.len());
        for (j, x0) in points.iter().enumerate() {
            check_start(system, x0, path)?;
            let mut x = x0.clone();
            let mut v = frames.map(|f| f[j].clone()).unwrap_or_default();
            if !v.is_empty() && !system.model().is_tangent(x0, &v)? {
                return Err(FlowError::Contract(format!("tangent vector {j} is not tangent")));
            }
            let mut xs = vec![x.clone()];
            let mut vs = vec![v.clone()];
            let mut st = PathStatus::Alive;
            for k in 0..path.steps() {
                eng.step(&mut x, &mut v, path.increment(k), path.dt());
                st = eng.status(&x, &v, k + 1);
                if !st.is_alive() {
                    break;
                }
                xs.push(x.clone());
                vs.push(v.clone());
            }
            states.push(xs);
            if let Some(vf) = vframes.as_mut() {
                vf.push(vs);
            }
            status.push(st);
        }
        Ok(FlowEnsemble { dt: path.dt(), steps: path.steps(), states, frames: vframes, status })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn members(&self) -> usize {
        self.states.len()
    }

    /// States recorded up to (excluding) the stop step.
    pub fn path(&self, member: usize) -> &[Vec<f64>] {
        &self.states[member]
    }

    pub fn state(&self, member: usize, step: usize) -> Option<&[f64]> {
        self.states[member].get(step).map(|s| s.as_slice())
    }

    pub fn frame(&self, member: usize, step: usize) -> Option<&[f64]> {
        self.frames.as_ref()?.get(member)?.get(step).map(|s| s.as_slice())
    }

    pub fn status(&self, member: usize) -> PathStatus {
        self.status[member]
    }

    /// Numerical explosion step `ξ̂`, if the member stopped.
    pub fn explosion_step(&self, member: usize) -> Option<usize> {
        self.status[member].stop_step()
    }
}

#[derive(Clone)]
pub enum StopRule {
    ExitRadius { radius: f64, center: Vec<f64> },
    /// Triggers when the closure returns `true`.
    ExitSet(Arc<dyn Fn(&[f64]) -> bool + Send + Sync>),
    Horizon,
}

impl StopRule {
    pub fn triggered(&self, x: &[f64]) -> bool {
        match self {
            StopRule::ExitRadius { radius, center } => dist(x, center) >= *radius,
            StopRule::ExitSet(f) => f(x),
            StopRule::Horizon => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExitTimes {
    /// First step at which each member triggered the rule (horizon if never).
    pub per_member: Vec<usize>,
    /// `S^K`: the minimum over members.
    pub stopped: usize,
}

/// First exit steps; a member that explodes first exits at its explosion step.
pub fn exit_time(ensemble: &FlowEnsemble, rule: &StopRule) -> ExitTimes {
    let per_member: Vec<usize> = (0..ensemble.members())
        .map(|j| {
            let hit = ensemble.path(j).iter().position(|x| rule.triggered(x));
            let stop = ensemble.explosion_step(j).unwrap_or(ensemble.steps());
            hit.map_or(stop, |h| h.min(stop))
        })
        .collect();
    let stopped = per_member.iter().copied().min().unwrap_or(ensemble.steps());
    ExitTimes { per_member, stopped }
}

/// A curve sampled at parameter values `s` with tangents `σ'(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledCurve {
    pub params: Vec<f64>,
    pub nodes: Vec<Vec<f64>>,
    pub tangents: Vec<Vec<f64>>,
}

impl SampledCurve {
    /// Straight segment from `a` to `b` with `n ≥ 2` nodes.
    pub fn segment(a: &[f64], b: &[f64], n: usize) -> Self {
        let n = n.max(2);
        let tangent: Vec<f64> = a.iter().zip(b).map(|(p, q)| q - p).collect();
        let params: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let nodes = params.iter().map(|s| a.iter().zip(&tangent).map(|(p, t)| p + s * t).collect()).collect();
        SampledCurve { params, nodes, tangents: vec![tangent; n] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveTransport {
    pub image: Vec<Vec<f64>>,
    pub initial_length: f64,
    pub length: f64,
    /// Node index of the first member to explode, if any.
    pub first_explosion: Option<usize>,
    /// Smallest distance of any node to the puncture over the run.
    pub min_puncture_distance: Option<f64>,
}

fn trapezoid(params: &[f64], values: &[f64]) -> f64 {
    params
        .windows(2)
        .zip(values.windows(2))
        .map(|(s, f)| 0.5 * (s[1] - s[0]) * (f[0] + f[1]))
        .sum()
}

/// Moves every node by the flow and every tangent by the derivative flow
/// under one path; the length is the trapezoid rule for `∫|TF(σ'(s))| ds`.
pub fn transport_curve(
    system: &VectorFieldSystem,
    curve: &SampledCurve,
    path: &BrownianPath,
    opts: &FlowOptions,
) -> Result<CurveTransport> {
    let n = curve.nodes.len();
    if n < 2 || curve.params.len() != n || curve.tangents.len() != n {
        return Err(FlowError::Contract("curve needs matching params, nodes and tangents".into()));
    }
    let model = system.model();
    let speeds0: Vec<f64> = curve
        .nodes
        .iter()
        .zip(&curve.tangents)
        .map(|(x, v)| model.metric_norm(x, v))
        .collect::<Result<_>>()?;
    let ens = FlowEnsemble::simulate(system, &curve.nodes, Some(&curve.tangents), path, opts)?;
    let min_puncture_distance = match model.kind() {
        ModelKind::PuncturedFlat { puncture } => Some(
            (0..n)
                .flat_map(|j| ens.path(j).iter().map(move |x| dist(x, puncture)))
                .fold(f64::INFINITY, f64::min),
        ),
        _ => None,
    };
    let first_explosion = (0..n).find(|&j| !ens.status(j).is_alive());
    let image: Vec<Vec<f64>> = (0..n).map(|j| ens.path(j).last().cloned().unwrap_or_default()).collect();
    let length = if first_explosion.is_some() {
        f64::INFINITY
    } else {
        let speeds: Vec<f64> = (0..n)
            .map(|j| {
                let last = ens.steps();
                model.metric_norm(ens.state(j, last).unwrap(), ens.frame(j, last).unwrap())
            })
            .collect::<Result<_>>()?;
        trapezoid(&curve.params, &speeds)
    };
    Ok(CurveTransport {
        image,
        initial_length: trapezoid(&curve.params, &speeds0),
        length,
        first_explosion,
        min_puncture_distance,
    })
}

/// RFC-4180 CSV (CRLF line endings) of trajectories:
/// `path_id,step,time,x1..xd,v1..vd,exploded`.
pub fn trajectory_csv(paths: &[DerivativeTrajectory], dim: usize, with_v: bool) -> String {
    let mut out = String::new();
    out.push_str("path_id,step,time");
    for i in 1..=dim {
        let _ = write!(out, ",x{i}");
    }
    if with_v {
        for i in 1..=dim {
            let _ = write!(out, ",v{i}");
        }
    }
    out.push_str(",exploded\r\n");
    for (pid, p) in paths.iter().enumerate() {
        let exploded = !p.status.is_alive();
        let last = p.x.len().saturating_sub(1);
        for (k, x) in p.x.iter().enumerate() {
            let _ = write!(out, "{pid},{k},{}", k as f64 * p.dt);
            for c in x {
                let _ = write!(out, ",{c}");
            }
            if with_v {
                for c in &p.v[k] {
                    let _ = write!(out, ",{c}");
                }
            }
            let flag = exploded && k == last;
            let _ = write!(out, ",{}\r\n", u8::from(flag));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Embedding, ManifoldModel};
    use crate::systems::{gradient_brownian_from_embedding, Calculus, VectorFieldSystem};
    use approx::assert_abs_diff_eq;

    fn sched(t: f64, dt: f64) -> Schedule {
        Schedule::new(t, dt).unwrap()
    }

    #[test]
    fn driver_is_reproducible_and_streams_differ() {
        let s = sched(1.0, 0.01);
        let a = BrownianDriver::new(7, 3, 2).path(&s);
        let b = BrownianDriver::new(7, 3, 2).path(&s);
        let c = BrownianDriver::new(7, 4, 2).path(&s);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn increments_have_brownian_moments() {
        let s = sched(1.0, 0.01);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for stream in 0..200 {
            let p = BrownianDriver::new(1, stream, 1).path(&s);
            for k in 0..p.steps() {
                let d = p.increment(k)[0];
                sum += d;
                sq += d * d;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        // 20000 samples: mean se ≈ 7e-4, variance se ≈ 1e-4
        assert!(mean.abs() < 4e-3, "{mean}");
        assert!((var - 0.01).abs() < 6e-4, "{var}");
    }

    #[test]
    fn coarsening_preserves_endpoint() {
        let p = BrownianDriver::new(3, 0, 2).path(&sched(1.0, 0.125));
        let c = p.coarsen().unwrap();
        assert_eq!(c.steps(), 4);
        let (a, b) = (p.value_at(8), c.value_at(4));
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-15);
    }

    #[test]
    fn translation_is_exact() {
        let sys = VectorFieldSystem::translation(2);
        let path = BrownianDriver::new(42, 0, 2).path(&sched(1.0, 0.01));
        let tr = integrate_flow(&sys, &[0.5, -1.0], &path, &FlowOptions::default()).unwrap();
        let mut oracle = vec![0.5, -1.0];
        for k in 0..path.steps() {
            for (o, d) in oracle.iter_mut().zip(path.increment(k)) {
                *o += d;
            }
            assert_eq!(tr.states[k + 1], oracle);
        }
    }

    #[test]
    fn zero_system_stays_put() {
        let sys = VectorFieldSystem::zero(3);
        let path = BrownianDriver::new(1, 0, 3).path(&sched(1.0, 0.1));
        let tr = integrate_flow(&sys, &[1.0, 2.0, 3.0], &path, &FlowOptions::default()).unwrap();
        assert!(tr.states.iter().all(|s| s == &[1.0, 2.0, 3.0]));
    }

    #[test]
    fn derivative_flow_examples() {
        let opts = FlowOptions::default();
        let t = VectorFieldSystem::translation(2);
        let path = BrownianDriver::new(5, 0, 2).path(&sched(1.0, 0.01));
        let d = integrate_derivative_flow(&t, &[0.0, 0.0], &[0.3, 0.4], &path, DerivativeMode::Direct, &opts).unwrap();
        assert!(d.v.iter().all(|v| v == &[0.3, 0.4]));

        let ou = VectorFieldSystem::ornstein_uhlenbeck(1);
        let path = BrownianDriver::new(5, 0, 1).path(&sched(1.0, 1e-4));
        for mode in [DerivativeMode::Direct, DerivativeMode::LogRadial] {
            let d = integrate_derivative_flow(&ou, &[0.2], &[1.0], &path, mode, &opts).unwrap();
            assert_abs_diff_eq!(d.v.last().unwrap()[0], (-1.0f64).exp(), epsilon = 1e-3);
        }
    }

    #[test]
    fn direct_mode_is_linear_bitwise() {
        let model = ManifoldModel::flat(2);
        let sys = VectorFieldSystem::from_expressions(
            "inv",
            &["0".into(), "0".into()],
            &[vec!["y^2 - x^2".into(), "2*x*y".into()], vec!["-2*x*y".into(), "y^2 - x^2".into()]],
            Calculus::Stratonovich,
            model,
        )
        .unwrap();
        let path = BrownianDriver::new(9, 1, 2).path(&sched(0.5, 0.01));
        let opts = FlowOptions::default();
        let a = integrate_derivative_flow(&sys, &[1.0, 0.0], &[0.3, -0.7], &path, DerivativeMode::Direct, &opts)
            .unwrap();
        let b = integrate_derivative_flow(&sys, &[1.0, 0.0], &[0.6, -1.4], &path, DerivativeMode::Direct, &opts)
            .unwrap();
        for (va, vb) in a.v.iter().zip(&b.v) {
            assert_eq!(vb[0], 2.0 * va[0]);
            assert_eq!(vb[1], 2.0 * va[1]);
        }
    }

    #[test]
    fn zero_vector_gives_zero_path() {
        let ou = VectorFieldSystem::ornstein_uhlenbeck(1);
        let path = BrownianDriver::new(1, 0, 1).path(&sched(0.1, 0.01));
        for mode in [DerivativeMode::Direct, DerivativeMode::LogRadial] {
            let d = integrate_derivative_flow(&ou, &[0.0], &[0.0], &path, mode, &FlowOptions::default()).unwrap();
            assert!(d.v.iter().all(|v| v[0] == 0.0));
        }
    }

    #[test]
    fn direct_underflow_is_reported() {
        let sys = VectorFieldSystem::linear(DMatrix::from_element(1, 1, -800.0)).unwrap();
        let path = BrownianPath::zero(1, &sched(1.0, 1e-3));
        let err =
            integrate_derivative_flow(&sys, &[0.0], &[1.0], &path, DerivativeMode::Direct, &FlowOptions::default())
                .unwrap_err();
        assert!(matches!(err, FlowError::Underflow { .. }));
        let ok = integrate_derivative_flow(&sys, &[0.0], &[1.0], &path, DerivativeMode::LogRadial, &FlowOptions::default())
            .unwrap();
        assert_abs_diff_eq!(*ok.log_norm.last().unwrap(), -800.0, epsilon = 1e-6);
    }

    #[test]
    fn log_radial_identity_holds() {
        let sys = VectorFieldSystem::from_expressions(
            "k",
            &["0".into(), "0".into()],
            &[vec!["y".into(), "0".into()], vec!["0".into(), "x^2/2".into()]],
            Calculus::Stratonovich,
            ManifoldModel::flat(2),
        )
        .unwrap();
        let path = BrownianDriver::new(2, 0, 2).path(&sched(0.5, 1e-3));
        let d = integrate_derivative_flow(
            &sys,
            &[0.5, 0.2],
            &[1.0, 1.0],
            &path,
            DerivativeMode::LogRadial,
            &FlowOptions::default(),
        )
        .unwrap();
        let diag = d.radial.unwrap();
        let k = d.log_norm.len() - 1;
        let lhs = d.log_norm[k] - d.log_norm[0];
        let rhs = diag.martingale[k] - 0.5 * diag.quadratic_variation[k] + diag.drift_part[k];
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn explosion_is_flagged_not_fatal() {
        // dx = x^2 dt blows up at t = 1/x0
        let sys = VectorFieldSystem::from_expressions(
            "blow",
            &["x^2".into()],
            &[vec!["0".into()]],
            Calculus::Stratonovich,
            ManifoldModel::flat(1),
        )
        .unwrap();
        let path = BrownianPath::zero(1, &sched(2.0, 1e-3));
        let tr = integrate_flow(&sys, &[1.0], &path, &FlowOptions::default()).unwrap();
        let step = tr.status.stop_step().unwrap();
        assert!((step as f64 * 1e-3 - 1.0).abs() < 0.01);
    }

    #[test]
    fn sphere_flow_stays_on_sphere_with_tangent_frames() {
        let model = ManifoldModel::embedded(Embedding::sphere(3));
        let sys = gradient_brownian_from_embedding(&model, None).unwrap();
        let path = BrownianDriver::new(11, 0, 3).path(&sched(1.0, 1e-3));
        let d = integrate_derivative_flow(
            &sys,
            &[0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0],
            &path,
            DerivativeMode::Direct,
            &FlowOptions::default(),
        )
        .unwrap();
        for (x, v) in d.x.iter().zip(&d.v) {
            assert!((norm(x) - 1.0).abs() < 1e-12);
            assert!(dot(x, v).abs() < 1e-12);
        }
    }

    #[test]
    fn exit_times() {
        let sys = VectorFieldSystem::from_expressions(
            "unit drift",
            &["1".into()],
            &[vec!["0".into()]],
            Calculus::Stratonovich,
            ManifoldModel::flat(1),
        )
        .unwrap();
        let s = sched(2.0, 1e-3);
        let path = BrownianPath::zero(1, &s);
        let ens = FlowEnsemble::simulate(&sys, &[vec![0.0]], None, &path, &FlowOptions::default()).unwrap();
        let e = exit_time(&ens, &StopRule::ExitRadius { radius: 1.0, center: vec![0.0] });
        assert!((e.stopped as f64 * s.dt() - 1.0).abs() <= s.dt());
        assert_eq!(exit_time(&ens, &StopRule::Horizon).stopped, s.steps());

        let ou = VectorFieldSystem::ornstein_uhlenbeck(1);
        let path = BrownianDriver::new(4, 0, 1).path(&s);
        let ens = FlowEnsemble::simulate(&ou, &[vec![0.0], vec![0.3]], None, &path, &FlowOptions::default()).unwrap();
        let mut prev = vec![0; 2];
        for r in [0.1, 0.2, 0.5, 1.0, 3.0] {
            let e = exit_time(&ens, &StopRule::ExitRadius { radius: r, center: vec![0.0] });
            for (a, b) in e.per_member.iter().zip(&prev) {
                assert!(a >= b);
            }
            prev = e.per_member;
        }
    }

    #[test]
    fn translation_preserves_curve_length() {
        let sys = VectorFieldSystem::translation(2);
        let curve = SampledCurve::segment(&[0.0, 0.0], &[3.0, 4.0], 11);
        let path = BrownianDriver::new(8, 0, 2).path(&sched(1.0, 0.01));
        let out = transport_curve(&sys, &curve, &path, &FlowOptions::default()).unwrap();
        assert_eq!(out.initial_length, 5.0);
        assert_eq!(out.length, out.initial_length);
    }

    #[test]
    fn frame_operator_norm() {
        let mut f = Frame::new(vec![3.0, 0.0, 0.0, 4.0], 2);
        assert_abs_diff_eq!(f.log_operator_norm(), 4.0f64.ln(), epsilon = 1e-15);
        f.w.iter_mut().for_each(|a| *a *= 1e60);
        f.renormalize();
        assert_abs_diff_eq!(f.log_operator_norm(), 4.0f64.ln() + 60.0 * 10f64.ln(), epsilon = 1e-12);
        let g = Frame::new(vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.5], 3);
        assert_abs_diff_eq!(g.log_operator_norm(), 2.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn csv_has_header_and_crlf() {
        let ou = VectorFieldSystem::ornstein_uhlenbeck(1);
        let path = BrownianDriver::new(1, 0, 1).path(&sched(0.02, 0.01));
        let d = integrate_derivative_flow(&ou, &[1.0], &[1.0], &path, DerivativeMode::Direct, &FlowOptions::default())
            .unwrap();
        let csv = trajectory_csv(&[d], 1, true);
        let lines: Vec<&str> = csv.split("\r\n").collect();
        assert_eq!(lines[0], "path_id,step,time,x1,v1,exploded");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0,0,1,1,0"));
    }
}
