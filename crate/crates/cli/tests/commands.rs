use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossover_cli::dataset::write_dataset;
use crossover_core::sequences::sample_assignment;
use crossover_core::simulator::seeded_consistent_table;
use crossover_core::{
    assemble, estimate, feasible_rwls, CrossoverDesign, FitOptions, ObservedDataset, Scenario, WeightChoice,
};
use serde_json::Value;
use tempfile::TempDir;

fn crossover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossover"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}); stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const STUDY: &str = r#"
scenario = "b"
k = 1
replications = 40
seed = 11
table_seed = 5

[generator]
kind = "gaussian_model"
beta1 = [0.0, 0.0, 1.0, 1.0]
beta2 = [0.0, 1.0, 0.0, 1.0]
rho = 0.3

[design]
AA = 30
AB = 30
BA = 30
BB = 30
"#;

#[test]
fn two_sequence_design_is_not_identified_without_carryover_limits() {
    let dir = TempDir::new().unwrap();
    let design = write(&dir, "d.txt", "horizon 2\nAB 10\nBA 10\n");
    let out = crossover(&["identify", "--design", s(&design), "--scenario", "a"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rank 6 < 8"), "{stderr}");
    let report = json(&out);
    assert_eq!(report["identified"], false);
    assert_eq!(report["zero_columns"], serde_json::json!(["gamma2(AA)", "gamma2(BB)"]));

    let out = crossover(&["identify", "--design", s(&design), "--scenario", "b", "--k", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["identified"], true);
    assert_eq!(report["rank"], 8);
}

#[test]
fn identify_lists_mean_derivations() {
    let dir = TempDir::new().unwrap();
    let design = write(&dir, "d.txt", "horizon 3\nAAB 5\nABA 5\nBAA 5\n");
    let out = crossover(&["identify", "--design", s(&design), "--scenario", "c", "--k", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    let means = report["means"].as_array().unwrap();
    assert_eq!(means.len(), 24);
    assert!(means.iter().all(|m| m["identified"] == true));
}

#[test]
fn three_period_fit_reports_one_row_per_period() {
    let dir = TempDir::new().unwrap();
    let design = CrossoverDesign::from_pairs(3, &[("AAB", 12), ("ABA", 12), ("BAA", 12)]).unwrap();
    let table = seeded_consistent_table(Scenario::B, 3, Some(1), 36, 4).unwrap();
    let data = ObservedDataset::from_table(&table, &sample_assignment(&design, 9)).unwrap();
    let csv = write(&dir, "data.csv", &write_dataset(&data));
    let out = crossover(&["fit", "--data", s(&csv), "--scenario", "b", "--k", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["engine"], "rwls");
    let labels: Vec<&str> = report["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["tau1", "tau2", "tau3"]);
    for e in report["estimates"].as_array().unwrap() {
        let (lo, hi) = (e["ci_lower"].as_f64().unwrap(), e["ci_upper"].as_f64().unwrap());
        assert!(lo < e["estimate"].as_f64().unwrap() && e["estimate"].as_f64().unwrap() < hi);
    }
}

#[test]
fn simulate_writes_reports_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "study.toml", STUDY);
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let o = crossover(&["simulate", "--config", s(&config), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report = std::fs::read(out1.join("report.json")).unwrap();
    assert_eq!(report, std::fs::read(out2.join("report.json")).unwrap());
    let bias = std::fs::read_to_string(out1.join("bias.csv")).unwrap();
    assert_eq!(bias, std::fs::read_to_string(out2.join("bias.csv")).unwrap());
    assert!(bias.starts_with("scenario,estimand,replication,bias\n"));
    let parsed: Value = serde_json::from_slice(&report).unwrap();
    let estimands = parsed["estimands"].as_array().unwrap().len();
    assert_eq!(bias.lines().count(), 1 + 40 * estimands);

    let o = crossover(&["simulate", "--config", s(&config), "--reps", "5", "--seed", "3"]);
    let r = json(&o);
    assert_eq!(r["replications"], 5);
    assert_eq!(r["seed"], 3);
}

#[test]
fn simulated_data_round_trips_to_identical_fits() {
    let dir = TempDir::new().unwrap();
    let config = write(&dir, "study.toml", STUDY);
    let csv = dir.path().join("sim.csv");
    let o = crossover(&[
        "simulate", "--config", s(&config), "--reps", "2", "--data-out", s(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0));

    let text = std::fs::read_to_string(&csv).unwrap();
    let data = crossover_cli::dataset::parse_dataset(&text).unwrap();
    assert_eq!(write_dataset(&data), text);

    let o = crossover(&[
        "fit", "--data", s(&csv), "--scenario", "b", "--k", "1", "--engine", "rwls",
    ]);
    let report = json(&o);
    let design = data.infer_design().unwrap();
    let restriction = assemble(Scenario::B, 2, design.scope(), Some(1)).unwrap();
    let fit = feasible_rwls(&data, &design, &restriction, &WeightChoice::Sample, FitOptions::default()).unwrap();
    let spec = crossover_cli::grammar::parse_estimand("tau t=2", design.scope()).unwrap();
    let direct = estimate(&fit, &spec, 0.95).unwrap();
    let row = &report["estimates"][1];
    assert_eq!(row["label"], "tau2");
    assert_eq!(row["estimate"].as_f64().unwrap().to_bits(), direct.point[0].to_bits());
    assert_eq!(row["se"].as_f64().unwrap().to_bits(), direct.se[0].to_bits());
}

#[test]
fn closed_form_engine_is_chosen_for_two_period_layouts() {
    let dir = TempDir::new().unwrap();
    let design = CrossoverDesign::from_pairs(2, &[("AB", 20), ("BA", 20)]).unwrap();
    let table = seeded_consistent_table(Scenario::C, 2, Some(1), 40, 2).unwrap();
    let data = ObservedDataset::from_table(&table, &sample_assignment(&design, 1)).unwrap();
    let csv = write(&dir, "data.csv", &write_dataset(&data));

    let report = json(&crossover(&["fit", "--data", s(&csv), "--scenario", "a"]));
    assert_eq!(report["engine"], "closed-form");
    assert_eq!(report["estimates"].as_array().unwrap().len(), 1);
    assert!(!report["not_estimable"].as_array().unwrap().is_empty());

    let report = json(&crossover(&["fit", "--data", s(&csv), "--scenario", "c", "--k", "1"]));
    assert_eq!(report["estimates"][0]["label"], "tau");

    let report = json(&crossover(&[
        "fit", "--data", s(&csv), "--scenario", "b", "--k", "1", "--estimand", "tau t=2 history=A",
    ]));
    assert_eq!(report["engine"], "rwls");
    assert_eq!(report["estimates"][0]["label"], "tau2(A)");
}

#[test]
fn user_weight_file() {
    let dir = TempDir::new().unwrap();
    let design = CrossoverDesign::from_pairs(2, &[("AB", 10), ("BA", 10)]).unwrap();
    let table = seeded_consistent_table(Scenario::B, 2, Some(1), 20, 8).unwrap();
    let data = ObservedDataset::from_table(&table, &sample_assignment(&design, 2)).unwrap();
    let csv = write(&dir, "data.csv", &write_dataset(&data));
    let weights = write(&dir, "w.json", r#"{"AB": [[1, 0], [0, 1]], "BA": [[1, 0], [0, 1]]}"#);
    let report = json(&crossover(&[
        "fit", "--data", s(&csv), "--scenario", "b", "--k", "1", "--weights", s(&weights),
    ]));
    assert_eq!(report["engine"], "rwls");
    assert_eq!(report["weights"]["provenance"], "user");
}

#[test]
fn audit_enumerates_small_designs() {
    let dir = TempDir::new().unwrap();
    let design = write(&dir, "d.txt", "horizon 2\nscope AB BA\nAB 3\nBA 3\n");
    let out = crossover(&["audit", "--design", s(&design), "--scenario", "b", "--k", "1", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["assignments"], "20");
    for row in report["rows"].as_array().unwrap() {
        let truth = row["truth"].as_f64().unwrap();
        let mean = row["exact_mean"].as_f64().unwrap();
        assert!((truth - mean).abs() < 1e-10, "{row}");
        let exact = row["exact_variance"].as_f64().unwrap();
        assert!(exact <= row["formula_variance"].as_f64().unwrap() + 1e-10, "{row}");
    }
}

#[test]
fn input_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let ragged = write(&dir, "bad.csv", "unit,sequence,y1,y2\n1,AB,0.5\n");
    let out = crossover(&["fit", "--data", s(&ragged), "--scenario", "a"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let missing = dir.path().join("missing.csv");
    let out = crossover(&["fit", "--data", s(&missing), "--scenario", "a"]);
    assert_eq!(out.status.code(), Some(1));

    let design = write(&dir, "d.txt", "horizon 2\nAB x\n");
    let out = crossover(&["identify", "--design", s(&design), "--scenario", "a"]);
    assert_eq!(out.status.code(), Some(2));

    let out = crossover(&["identify", "--design", s(&design), "--scenario", "q"]);
    assert_eq!(out.status.code(), Some(2));

    let good = write(&dir, "d2.txt", "horizon 2\nAB 3\nBA 3\n");
    let out = crossover(&["identify", "--design", s(&good), "--scenario", "b"]);
    assert_eq!(out.status.code(), Some(2), "scenario b without --k");

    let out = crossover(&["audit", "--design", s(&good), "--scenario", "a"]);
    assert_eq!(out.status.code(), Some(3));
}
