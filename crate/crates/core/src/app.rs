//! Configuration-driven front end: one `RunConfig` in, one self-describing
//! JSON report (and optionally a CSV table) out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::criteria::{
    available_backends, certify, check_growth, hp_scan, tangent_directions, CertifyConfig, GrowthKind, HpBackend,
    SampleRegion, Theorem,
};
use crate::error::FlowError;
use crate::estimators::{
    derivative_moment, exponential_functional, moment_exponent, radial_moment, radius_ladder, sample_paths,
    stopped_moment, McConfig, MomentEstimate, MomentKind,
};
use crate::expr;
use crate::flow::{
    integrate_derivative_flow, integrate_flow, trajectory_csv, BrownianDriver, DerivativeMode, DerivativeTrajectory,
    FlowOptions, Schedule,
};
use crate::geometry::{CurvatureData, ManifoldModel};
use crate::scenarios::{builtin, list_json, oracle_flow, Scenario};
use crate::semigroup::{gradient_consistency_check, ConsistencyOptions, ScalarObservable};
use crate::systems::{Calculus, VectorFieldSystem};

pub const SCHEMA: &str = "flowlab/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Dump sample paths of the flow and its derivative.
    Simulate,
    /// sup over the grid of E sup_s |T_xF_s|^p and of the terminal moment.
    DerivativeMoments,
    /// Derivative moments stopped at exits from a ladder of balls.
    StoppedMoments,
    /// E exp(theta * integral of f along paths) and its Jensen bound.
    ExpFunctional,
    /// E (1 + r(x_t))^p and exit probabilities from the pole.
    Radial,
    /// Exponential growth rate of the derivative moment.
    Exponent,
    /// Sampled verdicts for the completeness theorems.
    Certify,
    /// H_p on sampled points and directions.
    HpScan,
    /// Difference quotient of P_t f against the derivative semigroup.
    SemigroupCheck,
    /// Strong error of the integrator against an exact solution.
    OracleTest,
    /// List the built-in scenarios.
    Scenarios,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::DerivativeMoments => "derivative-moments",
            Command::StoppedMoments => "stopped-moments",
            Command::ExpFunctional => "exp-functional",
            Command::Radial => "radial",
            Command::Exponent => "exponent",
            Command::Certify => "certify",
            Command::HpScan => "hp-scan",
            Command::SemigroupCheck => "semigroup-check",
            Command::OracleTest => "oracle-test",
            Command::Scenarios => "scenarios",
        }
    }

    pub const ALL: [Command; 11] = [
        Command::Simulate,
        Command::DerivativeMoments,
        Command::StoppedMoments,
        Command::ExpFunctional,
        Command::Radial,
        Command::Exponent,
        Command::Certify,
        Command::HpScan,
        Command::SemigroupCheck,
        Command::OracleTest,
        Command::Scenarios,
    ];
}

impl std::str::FromStr for Command {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| AppError::Validation(format!("unknown command `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
    Both,
}

/// A system given by coefficient expressions on R^n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub drift: Vec<String>,
    /// One row per state component, one column per noise component.
    pub diffusion: Vec<Vec<String>>,
    #[serde(default = "default_calculus")]
    pub calculus: Calculus,
    #[serde(default)]
    pub puncture: Option<Vec<f64>>,
}

fn default_calculus() -> Calculus {
    Calculus::Stratonovich
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub scenario: String,
    pub system: Option<SystemSpec>,
    pub p: f64,
    pub t: Option<f64>,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    /// Not part of the report: results do not depend on it.
    #[serde(skip_serializing)]
    pub workers: usize,
    pub confidence: f64,
    pub richardson: bool,
    pub explosion_radius: f64,
    pub x0: Option<Vec<f64>>,
    pub v0: Option<Vec<f64>>,
    pub grid: Option<Vec<Vec<f64>>>,
    pub radii: Option<Vec<f64>>,
    pub horizons: Vec<f64>,
    pub theorems: Option<Vec<String>>,
    pub region: SampleRegion,
    pub epsilon: f64,
    pub functional: String,
    pub theta: f64,
    pub observable: String,
    pub eps: f64,
    pub eps_ladder: Vec<f64>,
    pub levels: Vec<f64>,
    pub k0: Option<f64>,
    pub backend: Option<HpBackend>,
    pub dt_ladder: Vec<f64>,
    pub min_denominator: f64,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            scenario: "ou(1)".into(),
            system: None,
            p: 1.0,
            t: None,
            dt: 1e-3,
            paths: 10_000,
            seed: 0,
            workers: 1,
            confidence: 0.95,
            richardson: true,
            explosion_radius: 1e6,
            x0: None,
            v0: None,
            grid: None,
            radii: None,
            horizons: vec![1.0, 2.0, 3.0, 4.0],
            theorems: None,
            region: SampleRegion::default(),
            epsilon: 0.25,
            functional: "1 + log(1 + x1^2)".into(),
            theta: 0.05,
            observable: "x1".into(),
            eps: 1e-2,
            eps_ladder: vec![1e-1, 1e-2, 1e-3],
            levels: vec![2.0, 4.0, 8.0, 16.0],
            k0: None,
            backend: None,
            dt_ladder: vec![4e-3, 1e-3, 2.5e-4],
            min_denominator: 0.25,
            out: None,
            format: Format::Json,
        }
    }
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 2,
            AppError::Flow(FlowError::Underflow { .. }) => 3,
            AppError::Flow(FlowError::Io(_)) | AppError::Io(_) => 1,
            AppError::Flow(_) => 2,
        }
    }
}

type AppResult<T> = std::result::Result<T, AppError>;

impl RunConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> AppResult<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text)
                .map_err(|e| AppError::Validation(format!("line {}, column {}: {e}", e.line(), e.column())))
        } else {
            toml::from_str(text).map_err(|e| AppError::Validation(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            AppError::Validation(m) => AppError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: &str| Err(AppError::Validation(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.t.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return bad("t must be positive");
        }
        if self.paths == 0 {
            return bad("paths must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return bad("p must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if !(self.explosion_radius > 0.0) {
            return bad("explosion_radius must be positive");
        }
        if self.theta < 0.0 {
            return bad("theta must be nonnegative");
        }
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| w[1] <= w[0]) || self.horizons[0] <= 0.0 {
            return bad("horizons must be positive and increasing");
        }
        if let Some(r) = &self.radii {
            if r.is_empty() || r[0] <= 0.0 || r.windows(2).any(|w| w[1] <= w[0]) {
                return bad("radii must be positive and increasing");
            }
        }
        if self.dt_ladder.len() < 2 || self.dt_ladder.iter().any(|d| !(*d > 0.0)) {
            return bad("dt_ladder needs at least two positive steps");
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration (worker count and output
    /// location excluded).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn mc(&self, t: f64) -> AppResult<McConfig> {
        Ok(McConfig {
            paths: self.paths,
            schedule: Schedule::new(t, self.dt)?,
            seed: self.seed,
            workers: self.workers,
            confidence: self.confidence,
            richardson: self.richardson,
            options: FlowOptions { explosion_radius: self.explosion_radius, ..FlowOptions::default() },
        })
    }
}

fn resolve_scenario(cfg: &RunConfig) -> AppResult<Scenario> {
    let Some(spec) = &cfg.system else {
        return Ok(builtin(&cfg.scenario)?);
    };
    let n = spec.drift.len();
    let model = match &spec.puncture {
        Some(p) => ManifoldModel::punctured_flat(n, p.clone()),
        None => ManifoldModel::flat(n),
    };
    let system = VectorFieldSystem::from_expressions(spec.name.clone(), &spec.drift, &spec.diffusion, spec.calculus, model)?;
    let mut x0 = vec![0.0; n];
    if let Some(p) = &spec.puncture {
        // start away from the puncture
        x0 = p.iter().map(|a| a + 1.0).collect();
    }
    Ok(Scenario {
        name: spec.name.clone(),
        system,
        curvature: Some(CurvatureData::flat(n)),
        oracle: None,
        x0,
        t: 1.0,
        notes: vec!["user-defined system".into()],
        expected: BTreeMap::new(),
    })
}

/// Report body, optional CSV table, and whether any estimate was invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub command: Command,
    pub report: String,
    pub csv: Option<String>,
    pub invalid: bool,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.invalid {
            3
        } else {
            0
        }
    }
}

fn any_invalid(v: &Value) -> bool {
    match v {
        Value::Object(m) => m.get("invalid") == Some(&Value::Bool(true)) || m.values().any(any_invalid),
        Value::Array(a) => a.iter().any(any_invalid),
        _ => false,
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn render(&self) -> String {
        let field = |s: &str| {
            if s.contains([',', '"', '\r', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            out.push_str(&row.iter().map(|s| field(s)).collect::<Vec<_>>().join(","));
            out.push_str("\r\n");
        }
        out
    }
}

fn estimate_row(key: String, e: &MomentEstimate) -> Vec<String> {
    vec![key, e.value.to_string(), e.se.to_string(), e.n.to_string()]
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("results serialize")
}

/// Executes one command.
pub fn run(cfg: &RunConfig, command: Command) -> AppResult<RunOutput> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.command = Some(command);
    if command == Command::Scenarios {
        return finish(&cfg, command, None, list_json(), None);
    }
    let sc = resolve_scenario(&cfg)?;
    let t = cfg.t.unwrap_or(sc.t);
    cfg.t = Some(t);
    let x0 = cfg.x0.clone().unwrap_or_else(|| sc.x0.clone());
    if x0.len() != sc.system.dim() {
        return Err(AppError::Validation(format!("x0 has length {} but the system has dimension {}", x0.len(), sc.system.dim())));
    }
    sc.model().admissible(&x0)?;
    cfg.x0 = Some(x0.clone());
    let grid = cfg.grid.clone().unwrap_or_else(|| vec![x0.clone()]);
    let mc = cfg.mc(t)?;
    let (result, csv): (Value, Option<String>) = match command {
        Command::Scenarios => unreachable!("handled above"),
        Command::Simulate => simulate(&sc, &x0, &cfg, &mc)?,
        Command::DerivativeMoments => {
            let sup = derivative_moment(&sc.system, &grid, cfg.p, MomentKind::RunningSup, &mc)?;
            let term = derivative_moment(&sc.system, &grid, cfg.p, MomentKind::Terminal, &mc)?;
            let mut tab = Table::new(&["point", "sup_estimate", "sup_se", "terminal_estimate", "terminal_se", "n"]);
            for (i, (a, b)) in sup.per_point.iter().zip(&term.per_point).enumerate() {
                tab.push(vec![i.to_string(), a.value.to_string(), a.se.to_string(), b.value.to_string(), b.se.to_string(), a.n.to_string()]);
            }
            let note = format!("sup over K is the maximum over {} grid points", grid.len());
            (json!({ "p": cfg.p, "t": t, "running_sup": sup, "terminal": term, "grid_note": note }), Some(tab.render()))
        }
        Command::StoppedMoments => {
            let radii = cfg.radii.clone().unwrap_or_else(|| radius_ladder(1.0, 6));
            let s = stopped_moment(&sc.system, &grid, &radii, None, &mc)?;
            // sup H_1 on samples, for the Gronwall comparison
            let c = check_growth(&sc.system, sc.curvature.as_ref(), GrowthKind::HBound { p: 1.0 }, &cfg.region)
                .ok()
                .filter(|g| g.bounded)
                .map(|g| g.conditions[0].constant);
            let bound = c.map(|c| (0.5 * c * t).exp());
            let checks: Vec<Value> = s
                .rungs
                .iter()
                .map(|r| {
                    json!({
                        "radius": r.radius,
                        "indicator_within": bound.map(|b| r.indicator.value <= b + 3.0 * r.indicator.uncertainty),
                        "stopped_within": bound.map(|b| r.stopped.value <= b + 3.0 * r.stopped.uncertainty),
                    })
                })
                .collect();
            let mut tab = Table::new(&["radius", "estimate", "se", "n"]);
            for r in &s.rungs {
                tab.push(estimate_row(r.radius.to_string(), &r.indicator));
            }
            (
                json!({
                    "t": t,
                    "stopped": s,
                    "sup_h1": c,
                    "gronwall_bound": bound,
                    "gronwall": checks,
                    "ladder_note": "finite radius ladder; the limit in the radius is not sampled",
                }),
                Some(tab.render()),
            )
        }
        Command::ExpFunctional => {
            let f = expr::parse(&cfg.functional, sc.system.dim())?;
            let e = exponential_functional(&sc.system, &|x| f.eval(x), &x0, cfg.theta, &mc)?;
            let mut tab = Table::new(&["quantity", "estimate", "se", "n"]);
            tab.push(estimate_row("functional".into(), &e.estimate));
            tab.push(estimate_row("jensen".into(), &e.jensen));
            (json!({ "f": cfg.functional, "t": t, "result": e, "ordered": e.ordered() }), Some(tab.render()))
        }
        Command::Radial => {
            let curv = sc
                .curvature
                .clone()
                .filter(|c| c.pole.is_some())
                .ok_or_else(|| AppError::Validation(format!("`{}` has no pole", sc.name)))?;
            let r = radial_moment(&sc.system, &curv, &x0, cfg.p, &cfg.levels, cfg.k0, &mc)?;
            let mut tab = Table::new(&["level", "estimate", "se", "n"]);
            for e in &r.exits {
                tab.push(estimate_row(e.level.to_string(), &e.probability));
            }
            (to_value(&r), Some(tab.render()))
        }
        Command::Exponent => {
            let fit = moment_exponent(&sc.system, &grid, cfg.p, &cfg.horizons, &mc)?;
            let mut tab = Table::new(&["t", "estimate", "se", "n"]);
            for q in &fit.points {
                tab.push(estimate_row(q.t.to_string(), &q.estimate));
            }
            (to_value(&fit), Some(tab.render()))
        }
        Command::Certify => {
            let theorems = cfg.theorems.clone().unwrap_or_else(|| Theorem::ALL.iter().map(|t| t.id().to_string()).collect());
            let cc = CertifyConfig { theorems, region: cfg.region.clone(), p: cfg.p, epsilon: cfg.epsilon };
            let report = certify(&sc.system, sc.curvature.as_ref(), &cc);
            let mut tab = Table::new(&["theorem", "status", "samples"]);
            for e in &report.entries {
                tab.push(vec![e.theorem.clone(), e.status.to_string(), e.samples.to_string()]);
            }
            let mismatches: Vec<&String> = sc
                .expected
                .iter()
                .filter(|(id, st)| report.entry(id).is_some_and(|e| e.status != **st))
                .map(|(id, _)| id)
                .collect();
            (json!({ "verdicts": report, "expected": sc.expected, "mismatches": mismatches }), Some(tab.render()))
        }
        Command::HpScan => hp_scan_command(&sc, &cfg)?,
        Command::SemigroupCheck => {
            let obs = ScalarObservable::from_expression(&cfg.observable, sc.system.dim())?;
            let v0 = match &cfg.v0 {
                Some(v) => v.clone(),
                None => sc.default_tangent(&x0)?,
            };
            let opts = ConsistencyOptions { eps_ladder: cfg.eps_ladder.clone(), eps: cfg.eps, probe_nodes: 5 };
            let r = gradient_consistency_check(&sc.system, &obs, &x0, &v0, &mc, &opts)?;
            let mut tab = Table::new(&["eps", "estimate", "se", "n"]);
            for rung in &r.ladder {
                tab.push(estimate_row(rung.eps.to_string(), &rung.fd));
            }
            (json!({ "f": cfg.observable, "x": x0, "v": v0, "t": t, "report": r }), Some(tab.render()))
        }
        Command::OracleTest => oracle_test(&sc, &x0, t, &cfg)?,
    };
    finish(&cfg, command, Some(&sc), result, csv)
}

fn finish(cfg: &RunConfig, command: Command, sc: Option<&Scenario>, result: Value, csv: Option<String>) -> AppResult<RunOutput> {
    let invalid = any_invalid(&result);
    let report = json!({
        "schema": SCHEMA,
        "command": command.name(),
        "scenario": sc.map(|s| s.name.clone()),
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg,
        "result": result,
    });
    let report = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    Ok(RunOutput { command, report, csv, invalid })
}

fn simulate(sc: &Scenario, x0: &[f64], cfg: &RunConfig, mc: &McConfig) -> AppResult<(Value, Option<String>)> {
    let sys = &sc.system;
    let with_v = sys.require_jacobians().is_ok();
    let v0 = match &cfg.v0 {
        Some(v) => v.clone(),
        None => sc.default_tangent(x0)?,
    };
    let run_cfg = McConfig { richardson: false, ..mc.clone() };
    let (trajs, _) = sample_paths(&run_cfg, sys.noise_dim(), |path| {
        if with_v {
            integrate_derivative_flow(sys, x0, &v0, path, DerivativeMode::Direct, &run_cfg.options)
        } else {
            let tr = integrate_flow(sys, x0, path, &run_cfg.options)?;
            Ok(DerivativeTrajectory {
                dt: tr.dt,
                mode: DerivativeMode::Direct,
                x: tr.states,
                v: Vec::new(),
                log_norm: Vec::new(),
                radial: None,
                status: tr.status,
            })
        }
    })?;
    let d = sys.dim();
    let alive: Vec<&DerivativeTrajectory> = trajs.iter().filter(|p| p.status.is_alive()).collect();
    let mut mean = vec![0.0; d];
    for p in &alive {
        for (m, a) in mean.iter_mut().zip(p.x.last().expect("initial state")) {
            *m += a / alive.len() as f64;
        }
    }
    let exploded = trajs.iter().filter(|p| matches!(p.status, crate::flow::PathStatus::Exploded { .. })).count();
    let exits = trajs.iter().filter(|p| matches!(p.status, crate::flow::PathStatus::DomainExit { .. })).count();
    let csv = trajectory_csv(&trajs, d, with_v);
    let result = json!({
        "paths": trajs.len(),
        "steps": mc.schedule.steps(),
        "dt": mc.schedule.dt(),
        "t": mc.schedule.horizon(),
        "v0": if with_v { Some(v0) } else { None },
        "exploded": exploded,
        "domain_exits": exits,
        "terminal_mean": mean,
    });
    Ok((result, Some(csv)))
}

fn hp_scan_command(sc: &Scenario, cfg: &RunConfig) -> AppResult<(Value, Option<String>)> {
    let sys = &sc.system;
    let curv = sc.curvature.as_ref();
    let backend = match cfg.backend {
        Some(b) => b,
        None => *available_backends(sys, curv)
            .first()
            .ok_or_else(|| FlowError::Capability("no H_p backend applies to this system".into()))?,
    };
    let region = SampleRegion { shells: 6, directions: 8, ..cfg.region.clone() };
    let mut points = Vec::new();
    for shell in region.shells(sys.model(), curv) {
        for x in shell.points {
            let b = sys.model().tangent_basis(&x)?;
            for v in tangent_directions(&b, 2) {
                points.push((x.clone(), v));
            }
        }
    }
    let report = hp_scan(sys, curv, cfg.p, backend, &points)?;
    let d = sys.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend((1..=d).map(|i| format!("v{i}")));
    header.push("h_p".into());
    let mut tab = Table { header, rows: Vec::new() };
    for s in &report.samples {
        let mut row: Vec<String> = s.x.iter().chain(&s.v).map(|a| a.to_string()).collect();
        row.push(s.value.to_string());
        tab.push(row);
    }
    Ok((to_value(&report), Some(tab.render())))
}

fn oracle_test(sc: &Scenario, x0: &[f64], t: f64, cfg: &RunConfig) -> AppResult<(Value, Option<String>)> {
    if sc.oracle.is_none() {
        return Err(AppError::Validation(format!("`{}` has no exact solution", sc.name)));
    }
    let mut dts = cfg.dt_ladder.clone();
    dts.sort_by(|a, b| b.total_cmp(a));
    let finest = *dts.last().expect("ladder has entries");
    let factors: Vec<u32> = dts
        .iter()
        .map(|d| {
            let r = d / finest;
            let k = r.log2().round();
            if (r - 2f64.powf(k)).abs() > 1e-9 * r {
                Err(AppError::Validation("dt_ladder entries must be the finest step times powers of two".into()))
            } else {
                Ok(k as u32)
            }
        })
        .collect::<AppResult<_>>()?;
    let schedule = Schedule::new(t, finest)?;
    let opts = FlowOptions { explosion_radius: cfg.explosion_radius, ..FlowOptions::default() };
    let m = sc.system.noise_dim();
    let mut sq = vec![0.0; dts.len()];
    let mut accepted = 0usize;
    let mut scanned = 0u64;
    let mut numerical_failures = 0usize;
    let limit = 50 * cfg.paths as u64;
    while accepted < cfg.paths && scanned < limit {
        let path = BrownianDriver::new(cfg.seed, scanned, m).path(&schedule);
        scanned += 1;
        let exact = oracle_flow(sc, x0, &path)?;
        if exact.singular.is_some() || exact.min_denominator < cfg.min_denominator {
            continue;
        }
        let truth = exact.states.last().expect("oracle has states").clone();
        let mut errs = Vec::with_capacity(dts.len());
        for &k in &factors {
            let mut p = path.clone();
            for _ in 0..k {
                p = p.coarsen().ok_or_else(|| AppError::Validation("dt_ladder is too coarse for the horizon".into()))?;
            }
            let tr = integrate_flow(&sc.system, x0, &p, &opts)?;
            if !tr.status.is_alive() || p.steps() * (1 << k) != path.steps() {
                break;
            }
            let e: f64 = tr.terminal().iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum();
            errs.push(e);
        }
        if errs.len() != dts.len() {
            numerical_failures += 1;
            continue;
        }
        sq.iter_mut().zip(&errs).for_each(|(s, e)| *s += e);
        accepted += 1;
    }
    if accepted < 2 {
        return Err(AppError::Validation("too few nonsingular paths for the oracle test".into()));
    }
    let rms: Vec<f64> = sq.iter().map(|s| (s / accepted as f64).sqrt()).collect();
    let pts: Vec<(f64, f64)> = dts.iter().zip(&rms).filter(|(_, r)| **r > 0.0).map(|(d, r)| (d.ln(), r.ln())).collect();
    let slope = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
    });
    let mut tab = Table::new(&["dt", "rms_error", "n"]);
    for (d, r) in dts.iter().zip(&rms) {
        tab.push(vec![d.to_string(), r.to_string(), accepted.to_string()]);
    }
    Ok((
        json!({
            "t": t,
            "dt": dts,
            "rms_error": rms,
            "slope": slope,
            "accepted": accepted,
            "scanned": scanned,
            "numerical_failures": numerical_failures,
            "min_denominator": cfg.min_denominator,
            "error": "terminal Euclidean error against the exact solution, root mean square over accepted paths",
        }),
        Some(tab.render()),
    ))
}

/// Writes the outputs of a run; returns the files written.
pub fn write_outputs(out: &RunOutput, dir: &Path, format: Format) -> AppResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(format, Format::Json | Format::Both) {
        let p = dir.join(format!("{}.json", out.command.name()));
        std::fs::write(&p, &out.report)?;
        written.push(p);
    }
    if matches!(format, Format::Csv | Format::Both) {
        if let Some(csv) = &out.csv {
            let p = dir.join(format!("{}.csv", out.command.name()));
            std::fs::write(&p, csv)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Parser)]
#[command(name = "flowlab", version, about = "Simulation and certification of stochastic flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML (or JSON) run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    #[arg(long, global = true, env = "FLOWLAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub t: Option<f64>,
    #[arg(long, global = true)]
    pub p: Option<f64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory; without it the report goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

impl Cli {
    pub fn to_config(&self) -> AppResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.scenario {
            cfg.scenario = s.clone();
            cfg.system = None;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.paths {
            cfg.paths = v;
        }
        if let Some(v) = self.dt {
            cfg.dt = v;
        }
        if let Some(v) = self.t {
            cfg.t = Some(v);
        }
        if let Some(v) = self.p {
            cfg.p = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.format {
            cfg.format = v;
        }
        if let Some(c) = cfg.command {
            if c != self.command {
                eprintln!("note: config names `{}` but `{}` was requested", c.name(), self.command.name());
            }
        }
        Ok(cfg)
    }
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = cli.to_config().and_then(|cfg| {
        let out = run(&cfg, cli.command)?;
        match &cfg.out {
            Some(dir) => {
                for p in write_outputs(&out, dir, cfg.format)? {
                    eprintln!("wrote {}", p.display());
                }
            }
            None => match (cfg.format, &out.csv) {
                (Format::Csv, Some(csv)) => print!("{csv}"),
                _ => print!("{}", out.report),
            },
        }
        Ok(out)
    });
    match outcome {
        Ok(out) => {
            if out.invalid {
                eprintln!("error: at least one estimate is invalid (every path was truncated)");
            }
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig { paths: 40, dt: 1e-2, ..RunConfig::default() }
    }

    #[test]
    fn toml_errors_carry_line_numbers() {
        let err = RunConfig::parse("paths = 10\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let ok = RunConfig::parse("scenario = \"kunita\"\npaths = 5\nradii = [1.0, 2.0]\n").unwrap();
        assert_eq!(ok.paths, 5);
    }

    #[test]
    fn certify_ou_report() {
        let out = run(&small(), Command::Certify).unwrap();
        let v: Value = serde_json::from_str(&out.report).unwrap();
        assert_eq!(v["schema"], SCHEMA);
        let entries = v["result"]["verdicts"]["entries"].as_array().unwrap();
        assert!(entries.iter().any(|e| e["theorem"] == "Cor5.2" && e["status"] == "certified"));
        assert_eq!(v["result"]["mismatches"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn reports_do_not_depend_on_workers() {
        let a = run(&small(), Command::DerivativeMoments).unwrap();
        let b = run(&RunConfig { workers: 3, ..small() }, Command::DerivativeMoments).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_errors() {
        let e = run(&RunConfig { dt: -1.0, ..small() }, Command::Exponent).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = run(&RunConfig { scenario: "nowhere".into(), ..small() }, Command::Exponent).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = run(&RunConfig { scenario: "kunita".into(), ..small() }, Command::OracleTest).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn invalid_estimates_exit_three() {
        let cfg = RunConfig { explosion_radius: 1e-9, x0: Some(vec![1.0]), paths: 4, ..small() };
        let out = run(&cfg, Command::DerivativeMoments).unwrap();
        assert_eq!(out.exit_code(), 3);
    }

    #[test]
    fn custom_system_from_config() {
        let text = r#"
scenario = "ignored"
paths = 20
dt = 0.01
[system]
name = "geometric"
drift = ["0"]
diffusion = [["x"]]
calculus = "ito"
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let out = run(&RunConfig { x0: Some(vec![1.0]), ..cfg }, Command::Exponent).unwrap();
        let v: Value = serde_json::from_str(&out.report).unwrap();
        // Itô dx = x dB: E|T_xF_t| = E exp(B_t - t/2) = 1
        let slope = v["result"]["slope"].as_f64().unwrap();
        assert!(slope.abs() < 0.5, "{slope}");
    }
}
