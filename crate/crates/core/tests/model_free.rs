//! The learning path runs purely from serialized input-output data.
//!
//! This crate has no dependency on any plant/oracle code, so the test
//! binary literally cannot touch state-space matrices: everything below
//! works from JSON fixtures alone. The dataset schema itself rejects
//! plant-matrix fields.

use nalgebra::DMatrix;
use qreg_core::datagen::IoDataset;
use qreg_core::nonmin;
use qreg_core::qlearn::{self, RunOptions};

const UNSTABLE_321: &str = include_str!("data/dataset_321_unstable.json");
const UNSTABLE_422: &str = include_str!("data/dataset_422_unstable.json");

fn learn(ds: &IoDataset) -> qlearn::QlReport {
    let qy = DMatrix::identity(ds.output_dim(), ds.output_dim()) * 100.0;
    let r = DMatrix::identity(ds.input_dim(), ds.input_dim());
    qlearn::run(ds, &qy, &r, &RunOptions::default()).expect("learning from the fixture")
}

#[test]
fn learn_path_runs_from_serialized_data_only() {
    for (name, text) in [("321", UNSTABLE_321), ("422", UNSTABLE_422)] {
        let ds = IoDataset::from_json_str(text).unwrap();
        assert!(nonmin::audit(&ds).all_pass(), "fixture {name} audit");
        let report = learn(&ds);
        assert!(report.converged, "fixture {name} converged");
        let last = report.iterations.last().unwrap();
        assert!(last.gain_update <= 1e-10, "fixture {name}: {:.3e}", last.gain_update);
        for it in &report.iterations {
            assert!(it.stein_residual <= 1e-9);
            assert!(it.rho_closed_loop < 1.0);
        }
    }
}

#[test]
fn dataset_schema_rejects_plant_matrices() {
    // A dataset file carrying state-space matrices must not parse: the
    // learner cannot even be handed plant knowledge by accident.
    let mut v: serde_json::Value = serde_json::from_str(UNSTABLE_321).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.insert("a".into(), serde_json::json!([[1.2, 0.0], [0.0, 0.5]]));
    obj.insert("b".into(), serde_json::json!([[1.0], [0.0]]));
    obj.insert("c".into(), serde_json::json!([[1.0, 0.0]]));
    assert!(IoDataset::from_json_str(&v.to_string()).is_err());

    // The fixtures themselves contain only data fields.
    let v: serde_json::Value = serde_json::from_str(UNSTABLE_321).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    assert_eq!(keys, ["episodes", "lag", "pe_order"]);
}

#[test]
fn multi_episode_fixture_spans_episodes() {
    let ds = IoDataset::from_json_str(UNSTABLE_422).unwrap();
    assert!(ds.episodes().len() >= 2);
    // The basis draws columns from more than one episode.
    let gamma = nonmin::compute_gamma(&ds, ds.lag(), ds.state_order()).unwrap();
    let z = nonmin::build_z(&ds, &gamma, ds.lag()).unwrap();
    let basis = nonmin::build_basis(&ds, &z).unwrap();
    let episodes_used: std::collections::BTreeSet<usize> = basis
        .selected
        .iter()
        .map(|&s| basis.usable[s].0)
        .collect();
    assert!(episodes_used.len() >= 2, "selected from {episodes_used:?}");
}
