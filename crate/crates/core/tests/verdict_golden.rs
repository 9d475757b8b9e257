//! Pinned certify statuses. Regenerate with `FLOWLAB_BLESS=1`.

use std::collections::BTreeMap;

use flowlab::criteria::{certify, CertifyConfig};
use flowlab::scenarios::builtin;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/verdicts.json");
const SCENARIOS: [&str; 5] = ["ou(1)", "translation(2)", "sphere(3)", "kunita", "punctured_translation(2)"];

#[test]
fn statuses_match_golden_file() {
    let mut got: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for name in SCENARIOS {
        let sc = builtin(name).unwrap();
        let report = certify(&sc.system, sc.curvature.as_ref(), &CertifyConfig::default());
        let row = report.entries.iter().map(|e| (e.theorem.clone(), e.status.to_string())).collect();
        got.insert(name.to_string(), row);
    }
    let text = serde_json::to_string_pretty(&got).unwrap() + "\n";
    if std::env::var("FLOWLAB_BLESS").is_ok_and(|v| v == "1") {
        std::fs::write(GOLDEN, &text).unwrap();
    }
    let want = std::fs::read_to_string(GOLDEN).expect("golden file present");
    assert_eq!(text, want);
}

#[test]
fn kunita_failure_carries_a_witness() {
    let sc = builtin("kunita").unwrap();
    let report = certify(&sc.system, sc.curvature.as_ref(), &CertifyConfig::default());
    let e = report.entry("Thm6.2").unwrap();
    assert_eq!(e.status.to_string(), "failed");
    let w = e.witness.as_ref().expect("witness");
    assert!(w.ratio.is_finite() || w.ratio == f64::INFINITY);
}
