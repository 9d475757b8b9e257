//! Built-in systems with exact pathwise solutions where one exists, and the
//! negative controls.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::criteria::Status;
use crate::error::{FlowError, Result};
use crate::flow::BrownianPath;
use crate::geometry::{dot, CurvatureData, Embedding, ManifoldModel};
use crate::systems::{gradient_brownian_from_embedding, Calculus, VectorFieldSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// `x_0 + B_t`.
    Translation,
    /// `x_{k+1} = e^{-h} x_k + (1 − e^{-h})/h · ΔB_k`.
    OrnsteinUhlenbeck,
    /// `z_0 / (1 + z_0 W_t)` with `W = B^1 + i B^2`.
    Inversion,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub system: VectorFieldSystem,
    pub curvature: Option<CurvatureData>,
    pub oracle: Option<Oracle>,
    pub x0: Vec<f64>,
    pub t: f64,
    pub notes: Vec<String>,
    /// Verdicts that `certify` must reproduce.
    pub expected: BTreeMap<String, Status>,
}

impl Scenario {
    pub fn model(&self) -> &ManifoldModel {
        self.system.model()
    }

    /// A unit tangent vector at `x`.
    pub fn default_tangent(&self, x: &[f64]) -> Result<Vec<f64>> {
        let b = self.model().tangent_basis(x)?;
        Ok(b.column(0).iter().copied().collect())
    }

    pub fn listing(&self) -> serde_json::Value {
        json!({
            "name": self.name,
            "system": self.system.name(),
            "model": self.model().label(),
            "dim": self.system.dim(),
            "noise_dim": self.system.noise_dim(),
            "oracle": self.oracle,
            "x0": self.x0,
            "t": self.t,
            "notes": self.notes,
            "expected": self.expected,
        })
    }
}

fn expect(pairs: &[(&str, Status)]) -> BTreeMap<String, Status> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `name` or `name(args)`.
fn split_name(src: &str) -> Result<(String, Option<String>)> {
    let s = src.trim();
    match s.find('(') {
        None => Ok((s.to_ascii_lowercase(), None)),
        Some(i) => {
            let inner = s[i + 1..]
                .strip_suffix(')')
                .ok_or_else(|| FlowError::UnknownScenario(src.to_string()))?;
            Ok((s[..i].trim().to_ascii_lowercase(), Some(inner.trim().to_string())))
        }
    }
}

fn dim_arg(arg: Option<&str>, default: usize, min: usize, src: &str) -> Result<usize> {
    let n = match arg {
        None | Some("") => default,
        Some(a) => a.parse().map_err(|_| FlowError::UnknownScenario(src.to_string()))?,
    };
    if n < min {
        return Err(FlowError::Config(format!("`{src}` needs dimension at least {min}")));
    }
    Ok(n)
}

/// `a,b;c,d` row-major.
fn parse_matrix(src: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = src
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| FlowError::Config(format!("bad matrix entry `{a}`"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(FlowError::Config("linear(...) needs a square matrix written as a,b;c,d".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub const BUILTIN_NAMES: [&str; 9] = [
    "translation(2)",
    "punctured_translation(2)",
    "rescaled_punctured_plane",
    "inversion_plane",
    "ou(1)",
    "kunita",
    "sphere(3)",
    "paraboloid",
    "linear(-1,0;0,-2)",
];

pub fn builtin(name: &str) -> Result<Scenario> {
    let (base, arg) = split_name(name)?;
    let arg = arg.as_deref();
    let canonical = |n: Option<usize>| match n {
        Some(n) => format!("{base}({n})"),
        None => base.clone(),
    };
    let sc = match base.as_str() {
        "translation" => {
            let n = dim_arg(arg, 2, 1, name)?;
            Scenario {
                name: canonical(Some(n)),
                system: VectorFieldSystem::translation(n),
                curvature: Some(CurvatureData::flat(n)),
                oracle: Some(Oracle::Translation),
                x0: vec![0.0; n],
                t: 1.0,
                notes: vec!["F_t(x) = x + B_t; the derivative flow is the identity".into()],
                expected: expect(&[("Cor5.2", Status::Certified), ("Thm6.2", Status::Certified)]),
            }
        }
        "punctured_translation" => {
            let n = dim_arg(arg, 2, 1, name)?;
            let model = ManifoldModel::punctured_flat(n, vec![0.0; n]);
            let mut x0 = vec![0.0; n];
            x0[0] = 1.0;
            Scenario {
                name: canonical(Some(n)),
                system: VectorFieldSystem::translation(n).with_model(model)?.renamed(canonical(Some(n))),
                curvature: Some(CurvatureData::flat(n)),
                oracle: Some(Oracle::Translation),
                x0,
                t: 1.0,
                notes: vec![
                    "the dynamics ignore the puncture; it only restricts the admissible set".into(),
                    "the space is incomplete, so no completeness theorem applies".into(),
                ],
                expected: expect(&[("Cor5.2", Status::Failed)]),
            }
        }
        "rescaled_punctured_plane" => {
            let model = ManifoldModel::inverse_radius_plane(2);
            Scenario {
                name: base.clone(),
                system: VectorFieldSystem::translation(2).with_model(model)?.renamed(base.clone()),
                curvature: None,
                oracle: Some(Oracle::Translation),
                x0: vec![1.0, 0.0],
                t: 1.0,
                notes: vec![
                    "metric |v|/|x| puts the origin at infinity".into(),
                    "sup_K E|T_xF_t| in this metric is finite; failure of strong 1-completeness concerns all modifications and cannot be sampled".into(),
                ],
                expected: expect(&[("Cor5.2", Status::NotApplicable)]),
            }
        }
        "inversion_plane" => {
            let rows = vec![
                vec!["y^2 - x^2".to_string(), "2*x*y".to_string()],
                vec!["-2*x*y".to_string(), "y^2 - x^2".to_string()],
            ];
            let system = VectorFieldSystem::from_expressions(
                base.clone(),
                &["0".into(), "0".into()],
                &rows,
                Calculus::Stratonovich,
                ManifoldModel::flat(2),
            )?;
            Scenario {
                name: base.clone(),
                system,
                curvature: Some(CurvatureData::flat(2)),
                oracle: Some(Oracle::Inversion),
                x0: vec![1.0, 0.0],
                t: 0.5,
                notes: vec![
                    "image of translation on the punctured plane under z -> 1/z".into(),
                    "paths where 1 + z_0 W_t reaches zero are singular for the exact solution".into(),
                ],
                expected: expect(&[("Cor5.2", Status::Failed), ("Thm6.2", Status::Failed)]),
            }
        }
        "ou" => {
            let n = dim_arg(arg, 1, 1, name)?;
            Scenario {
                name: canonical(Some(n)),
                system: VectorFieldSystem::ornstein_uhlenbeck(n),
                curvature: Some(CurvatureData::flat(n)),
                oracle: Some(Oracle::OrnsteinUhlenbeck),
                x0: vec![0.0; n],
                t: 1.0,
                notes: vec!["T_xF_t = e^{-t} Id; sup H_1 = -2".into()],
                expected: expect(&[
                    ("Cor5.2", Status::Certified),
                    ("Thm5.3", Status::Certified),
                    ("Thm6.2", Status::Certified),
                    ("Diffeo", Status::Certified),
                ]),
            }
        }
        "kunita" => {
            let rows = vec![vec!["y".to_string(), "0".to_string()], vec!["0".to_string(), "x^2/2".to_string()]];
            let system = VectorFieldSystem::from_expressions(
                base.clone(),
                &["0".into(), "0".into()],
                &rows,
                Calculus::Ito,
                ManifoldModel::flat(2),
            )?;
            Scenario {
                name: base.clone(),
                system,
                curvature: Some(CurvatureData::flat(2)),
                oracle: None,
                x0: vec![1.0, 0.0],
                t: 0.5,
                notes: vec![
                    "complete but not strongly complete".into(),
                    "moments blow up quickly; horizon capped at t = 0.5 by default".into(),
                ],
                expected: expect(&[("Thm6.2", Status::Failed)]),
            }
        }
        "sphere" => {
            let n = dim_arg(arg, 3, 2, name)?;
            let model = ManifoldModel::embedded(Embedding::sphere(n));
            let system = gradient_brownian_from_embedding(&model, None)?.renamed(canonical(Some(n)));
            let k = (n - 2) as f64;
            let mut pole = vec![0.0; n];
            pole[n - 1] = 1.0;
            let curvature = CurvatureData::default()
                .with_ricci(Arc::new(move |_x: &[f64], v: &[f64]| k * dot(v, v)))
                .with_pole(pole.clone());
            Scenario {
                name: canonical(Some(n)),
                system,
                curvature: Some(curvature),
                oracle: None,
                x0: pole,
                t: 1.0,
                notes: vec![format!("Brownian motion on S^{}; H_p = p + 1 - {n}", n - 1)],
                expected: expect(&[("Thm8.1", Status::Certified), ("Cor5.2", Status::Certified)]),
            }
        }
        "paraboloid" => {
            let model = ManifoldModel::embedded(Embedding::paraboloid());
            let system = gradient_brownian_from_embedding(&model, None)?.renamed(base.clone());
            Scenario {
                name: base.clone(),
                system,
                curvature: Some(CurvatureData::default().with_pole(vec![0.0, 0.0, 0.0])),
                oracle: None,
                x0: vec![0.0, 0.0, 0.0],
                t: 0.5,
                notes: vec!["gradient Brownian system of z = x^2 + y^2; curvature from the Gauss equation".into()],
                expected: expect(&[("Thm8.1", Status::Certified)]),
            }
        }
        "linear" => {
            let m = parse_matrix(arg.ok_or_else(|| FlowError::Config("linear needs a matrix: linear(a,b;c,d)".into()))?)?;
            let n = m.nrows();
            let system = VectorFieldSystem::linear(m)?;
            Scenario {
                name: format!("linear({})", arg.unwrap_or_default()),
                system,
                curvature: Some(CurvatureData::flat(n)),
                oracle: None,
                x0: vec![0.0; n],
                t: 1.0,
                notes: vec!["dx = dB + M x dt".into()],
                expected: expect(&[("Cor5.2", Status::Certified)]),
            }
        }
        _ => return Err(FlowError::UnknownScenario(name.to_string())),
    };
    Ok(sc)
}

pub fn list_json() -> serde_json::Value {
    let items: Vec<serde_json::Value> =
        BUILTIN_NAMES.iter().map(|n| builtin(n).expect("built-ins resolve").listing()).collect();
    json!({ "scenarios": items })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleTrajectory {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    /// Step at which the exact solution hit its singularity.
    pub singular: Option<usize>,
    /// `min_s |1 + z_0 W_s|` for the inversion oracle; infinity otherwise.
    pub min_denominator: f64,
}

/// Exact solution driven by the same increments the integrator consumes.
pub fn oracle_flow(scenario: &Scenario, x0: &[f64], path: &BrownianPath) -> Result<OracleTrajectory> {
    let oracle = scenario
        .oracle
        .ok_or_else(|| FlowError::Capability(format!("`{}` has no exact solution", scenario.name)))?;
    scenario.model().admissible(x0)?;
    let d = scenario.system.dim();
    if x0.len() != d || path.dim() != scenario.system.noise_dim() {
        return Err(FlowError::Contract("dimensions of x0 or the driver do not match".into()));
    }
    let h = path.dt();
    let mut states = Vec::with_capacity(path.steps() + 1);
    states.push(x0.to_vec());
    let mut singular = None;
    let mut min_denominator = f64::INFINITY;
    match oracle {
        Oracle::Translation => {
            let mut x = x0.to_vec();
            for k in 0..path.steps() {
                x.iter_mut().zip(path.increment(k)).for_each(|(a, b)| *a += b);
                states.push(x.clone());
            }
        }
        Oracle::OrnsteinUhlenbeck => {
            let decay = (-h).exp();
            let gain = -(-h).exp_m1() / h;
            let mut x = x0.to_vec();
            for k in 0..path.steps() {
                x.iter_mut().zip(path.increment(k)).for_each(|(a, b)| *a = decay * *a + gain * b);
                states.push(x.clone());
            }
        }
        Oracle::Inversion => {
            let (a, b) = (x0[0], x0[1]);
            let (mut w1, mut w2) = (0.0, 0.0);
            for k in 0..path.steps() {
                let db = path.increment(k);
                w1 += db[0];
                w2 += db[1];
                // 1 + z_0 W
                let (re, im) = (1.0 + a * w1 - b * w2, a * w2 + b * w1);
                let den = re * re + im * im;
                min_denominator = min_denominator.min(den.sqrt());
                if den.sqrt() < 1e-12 {
                    singular = Some(k + 1);
                    break;
                }
                // z_0 / (1 + z_0 W)
                states.push(vec![(a * re + b * im) / den, (b * re - a * im) / den]);
            }
        }
    }
    Ok(OracleTrajectory { dt: h, states, singular, min_denominator })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{certify, CertifyConfig};
    use crate::flow::{integrate_flow, BrownianDriver, FlowOptions, Schedule};
    use approx::assert_abs_diff_eq;

    #[test]
    fn names_resolve() {
        for n in BUILTIN_NAMES {
            let s = builtin(n).unwrap();
            assert!(s.model().admissible(&s.x0).is_ok(), "{n}");
        }
        assert_eq!(builtin("translation(3)").unwrap().system.dim(), 3);
        assert_eq!(builtin("sphere(4)").unwrap().system.dim(), 4);
        assert!(matches!(builtin("torus"), Err(FlowError::UnknownScenario(_))));
        assert!(builtin("linear(1,2;3)").is_err());
        assert_eq!(list_json()["scenarios"].as_array().unwrap().len(), BUILTIN_NAMES.len());
    }

    #[test]
    fn expected_verdicts_are_reproduced() {
        let cfg = CertifyConfig::default();
        for n in BUILTIN_NAMES {
            let s = builtin(n).unwrap();
            let cfg = CertifyConfig { theorems: s.expected.keys().cloned().collect(), ..cfg.clone() };
            let report = certify(&s.system, s.curvature.as_ref(), &cfg);
            for (id, status) in &s.expected {
                let got = report.entry(id).unwrap();
                assert_eq!(got.status, *status, "{n} {id}: {}", serde_json::to_string_pretty(got).unwrap());
            }
        }
    }

    #[test]
    fn oracles_match_integrator_exactly_where_the_scheme_is_exact() {
        let sched = Schedule::new(1.0, 1e-2).unwrap();
        let s = builtin("translation(2)").unwrap();
        let path = BrownianDriver::new(3, 0, 2).path(&sched);
        let o = oracle_flow(&s, &[0.5, -0.5], &path).unwrap();
        let tr = integrate_flow(&s.system, &[0.5, -0.5], &path, &FlowOptions::default()).unwrap();
        assert_eq!(o.states.last().unwrap(), tr.terminal());
        let ou = builtin("ou(1)").unwrap();
        let zero = BrownianPath::zero(1, &sched);
        let o = oracle_flow(&ou, &[2.0], &zero).unwrap();
        assert_abs_diff_eq!(o.states.last().unwrap()[0], 2.0 * (-1f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn inversion_from_one() {
        let s = builtin("inversion_plane").unwrap();
        let sched = Schedule::new(0.5, 1e-3).unwrap();
        let path = BrownianDriver::new(5, 1, 2).path(&sched);
        let o = oracle_flow(&s, &[1.0, 0.0], &path).unwrap();
        let w = path.value_at(path.steps());
        let (re, im) = (1.0 + w[0], w[1]);
        let den = re * re + im * im;
        if o.singular.is_none() {
            let last = o.states.last().unwrap();
            assert_abs_diff_eq!(last[0], re / den, epsilon = 1e-12);
            assert_abs_diff_eq!(last[1], -im / den, epsilon = 1e-12);
        }
        assert!(oracle_flow(&builtin("kunita").unwrap(), &[1.0, 0.0], &path).is_err());
    }
}
