//! P_{t+s} f = P_t (P_s f) at Monte Carlo resolution on OU.

use flowlab::estimators::McConfig;
use flowlab::flow::{integrate_flow, BrownianDriver, FlowOptions, Schedule};
use flowlab::scenarios::builtin;
use flowlab::semigroup::{estimate_ptf, ScalarObservable};

#[test]
fn nested_expectation_matches_direct_one() {
    let sc = builtin("ou(1)").unwrap();
    let f = ScalarObservable::square_norm();
    let x0 = [0.8];
    let (t, s, dt) = (0.5, 0.5, 1e-2);

    let direct = estimate_ptf(&sc.system, &f, &x0, &McConfig::new(4000, t + s, dt, 1).unwrap()).unwrap();

    let outer = 400;
    let sched = Schedule::new(t, dt).unwrap();
    let mut inner_means = Vec::with_capacity(outer);
    for k in 0..outer {
        let path = BrownianDriver::new(2, k as u64, 1).path(&sched);
        let y = integrate_flow(&sc.system, &x0, &path, &FlowOptions::default()).unwrap();
        let cfg = McConfig::new(50, s, dt, 1000 + k as u64).unwrap().without_richardson();
        inner_means.push(estimate_ptf(&sc.system, &f, y.terminal(), &cfg).unwrap().value);
    }
    let n = outer as f64;
    let mean = inner_means.iter().sum::<f64>() / n;
    let var = inner_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_nested = (var / n).sqrt();
    let combined = se_nested.hypot(direct.uncertainty);
    assert!((mean - direct.value).abs() <= 3.0 * combined, "nested {mean} vs direct {} (3 SE = {})", direct.value, 3.0 * combined);

    // closed form for Stratonovich OU dx = -x dt + dB: E x_t^2 = x0^2 e^{-2t} + (1 - e^{-2t}) / 2
    let exact = 0.64 * (-2.0f64).exp() + 0.5 * (1.0 - (-2.0f64).exp());
    assert!((direct.value - exact).abs() <= 4.0 * direct.uncertainty + 2e-3, "{} vs {exact}", direct.value);
}
