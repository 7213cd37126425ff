use ipn_core::ensemble::read_dump;
use ipn_core::harness::{
    predict, simulate, verify, CheckKind, ExperimentConfig, ExperimentReport, OutputFormat, SimulateOptions,
};

const SMALL: &str = r#"
trials = 4
checks = ["outliers", "overlaps", "aggregate", "cross_overlaps", "exclusion", "trace"]

[model]
sigma = 1.0
c = 0.5
nu = { family = "two-point", low = 0.5, high = 2.0, p_low = 0.5 }
spikes = [{ theta = 9.0 }, { theta = 6.0, multiplicity = 2 }]

[ensemble]
N = 120
entry_law = { kind = "rademacher" }
rotate = true
seed = 99

[tolerances]
outliers = 10.0
overlaps = 1.0
aggregate = 2.0
cross_overlaps = 1.0
exclusion = 10.0
"#;

fn opts(workers: usize) -> SimulateOptions {
    SimulateOptions { workers: Some(workers), dump_dir: None }
}

#[test]
fn replay_is_bitwise_stable_across_worker_counts() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let a = simulate(&cfg, &opts(1)).unwrap().without_timing();
    let b = simulate(&cfg, &opts(3)).unwrap().without_timing();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert!(a.pass);
}

#[test]
fn every_requested_check_appears_once() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let r = simulate(&cfg, &opts(2)).unwrap();
    for c in &cfg.checks {
        assert_eq!(r.checks.iter().filter(|x| x.check == *c).count(), 1);
    }
    assert_eq!(r.checks.len(), cfg.checks.len());
    assert_eq!(r.metadata.trial_seeds.len(), 4);
    assert_eq!(r.recompute_pass(), r.pass);
}

#[test]
fn json_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let r = verify(&cfg, &opts(1), Some(&path)).unwrap();
    let back: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn csv_export_has_one_row_per_sample() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let r = simulate(&cfg, &opts(1)).unwrap();
    let csv = r.to_csv();
    let samples: usize = r.checks.iter().flat_map(|c| &c.metrics).map(|m| m.samples.len()).sum();
    assert_eq!(csv.lines().count(), samples + 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    r.write(&path, OutputFormat::Csv).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("check,metric,trial,seed,value\n"));
}

#[test]
fn dumps_are_written_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(&SMALL.replace("trials = 4", "trials = 2")).unwrap();
    let o = SimulateOptions { workers: Some(1), dump_dir: Some(dir.path().to_path_buf()) };
    simulate(&cfg, &o).unwrap();
    let (m, flags) = read_dump(&dir.path().join("m_trial1.ipnm")).unwrap();
    assert_eq!((m.nrows(), m.ncols(), flags), (60, 60, 1));
}

#[test]
fn prediction_consumes_no_randomness() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let other = ExperimentConfig::from_toml_str(&SMALL.replace("seed = 99", "seed = 1")).unwrap();
    assert_eq!(predict(&cfg).unwrap(), predict(&other).unwrap());
}

#[test]
fn separation_gap_must_avoid_outliers() {
    let text =
        SMALL.replace("checks = [", "checks = [\"separation\", ") + "\n[separation]\ngaps = [[5.0, 20.0]]\n";
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    assert!(predict(&cfg).is_err());
}

#[test]
fn subcritical_spikes_are_noted() {
    let text = SMALL.replace(
        "spikes = [{ theta = 9.0 }, { theta = 6.0, multiplicity = 2 }]",
        "spikes = [{ theta = 2.1 }]",
    );
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let r = simulate(&cfg, &opts(1)).unwrap();
    assert!(!r.theory.predictions[0].in_outlier_set);
    assert!(!r.check(CheckKind::Overlaps).unwrap().notes.is_empty());
}

#[test]
fn report_keys_match_documented_schema() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&simulate(&cfg, &opts(1)).unwrap().to_json().unwrap()).unwrap();
    let keys = |v: &serde_json::Value| -> Vec<String> {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let documented = |def: &serde_json::Value| -> Vec<String> {
        let mut k: Vec<String> = def["properties"].as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    assert_eq!(keys(&report), documented(&schema));
    assert_eq!(keys(&report["theory"]), documented(&schema["$defs"]["theory"]));
    assert_eq!(keys(&report["metadata"]), documented(&schema["$defs"]["metadata"]));
    assert_eq!(keys(&report["theory"]["predictions"][0]), documented(&schema["$defs"]["prediction"]));
    let rules = schema["$defs"]["metric"]["properties"]["rule"]["enum"].as_array().unwrap();
    for m in report["checks"].as_array().unwrap().iter().flat_map(|c| c["metrics"].as_array().unwrap()) {
        assert!(rules.contains(&m["rule"]), "{}", m["rule"]);
    }
}
