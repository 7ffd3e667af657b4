//! End-to-end runs of the `ergokit` binary: exit codes, reports, CSV and SVG
//! artifacts, and config round trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ergokit::config::{emit_config, parse_config, parse_unresolved, Experiment};
use proptest::prelude::*;
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ergokit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergokit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("ERGOKIT_THREADS", "2")
        .output()
        .expect("spawn ergokit")
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn orey_check_reports_closed_form_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("levy-orey.toml");
    let o = ergokit(&["orey-check", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(tmp.path());
    assert_eq!(r["status"], "pass");
    let rows = r["verdicts"][0]["detail"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!((row["ratio"].as_f64().unwrap() - 4.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn brownian_drift_check_fails_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("brownian-drift.toml");
    let o = ergokit(&["drift-check", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let r = report(tmp.path());
    assert_eq!(r["status"], "fail");
    assert_eq!(r["verdicts"][0]["check"], "drift_condition");
    assert_eq!(r["verdicts"][0]["passed"], false);
    assert!(tmp.path().join("drift.csv").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "experiment = \"simulate\"\nhorizn = 3.0\n[model]\nname = \"example-e1\"\n");
    let out = tmp.path().join("out");
    let o = ergokit(&["simulate", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["status"], "error");
    assert_eq!(r["failed_stage"], "config");
    assert!(r["error"].as_str().unwrap().contains("horizn"));
}

#[test]
fn orey_check_without_levy_is_an_execution_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "experiment = \"orey-check\"\n[model]\nname = \"example-e1\"\n");
    let out = tmp.path().join("out");
    let o = ergokit(&["orey-check", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["failed_stage"], "orey-check");
    assert!(String::from_utf8_lossy(&o.stderr).contains("orey-check"));
}

#[test]
fn bad_arguments_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ergokit(&["no-such-experiment", "--config", "x.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

const SIMULATE: &str = "\
experiment = \"simulate\"
seed = 11
horizon = 2.0
dt = 0.02
n_paths = 200
csv_paths = 5

[model]
name = \"example-e1\"
";

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

#[test]
fn simulate_writes_csv_and_valid_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SIMULATE);
    let out = tmp.path().join("out");
    let o = ergokit(&["simulate", "--config", cfg.to_str().unwrap(), "--plot"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let arts: Vec<String> =
        report(&out)["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()).collect();
    for name in ["paths.csv", "moments.csv", "paths_x1.svg", "paths_x2.svg", "resolved_config.toml"] {
        assert!(arts.iter().any(|a| a == name), "missing {name} in {arts:?}");
        assert!(out.join(name).exists());
    }
    let t_grid = csv_rows(&out.join("moments.csv")).len();
    for svg in ["paths_x1.svg", "paths_x2.svg"] {
        let text = fs::read_to_string(out.join(svg)).unwrap();
        let doc = roxmltree::Document::parse(&text).expect("well-formed svg");
        let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(lines.len(), 5);
        for l in lines {
            assert_eq!(l.attribute("points").unwrap().split_whitespace().count(), t_grid);
        }
    }
}

#[test]
fn scatter_svg_has_one_point_per_csv_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("brownian-drift.toml");
    ergokit(&["drift-check", "--config", cfg.to_str().unwrap(), "--plot"], tmp.path());
    let rows = csv_rows(&tmp.path().join("drift.csv")).len();
    let text = fs::read_to_string(tmp.path().join("drift.svg")).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("circle")).count(), rows);
}

#[test]
fn reruns_produce_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SIMULATE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ergokit(&["simulate", "--config", cfg.to_str().unwrap(), "--plot"], &a);
    ergokit(&["simulate", "--config", cfg.to_str().unwrap(), "--plot"], &b);
    for name in ["paths.csv", "moments.csv", "paths_x1.svg", "paths_x2.svg"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    // the resolved configs differ only in the output directory
    let strip = |d: &Path| -> String {
        fs::read_to_string(d.join("resolved_config.toml"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("output"))
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let o = ergokit(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "12"], &b);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(fs::read(a.join("paths.csv")).unwrap(), fs::read(b.join("paths.csv")).unwrap());
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        let cfg = parse_config(&fs::read_to_string(&p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.build_model().unwrap();
    }
}

fn experiment() -> impl Strategy<Value = Experiment> {
    prop_oneof![
        Just(Experiment::Simulate),
        Just(Experiment::Couple),
        Just(Experiment::TvDecay),
        Just(Experiment::DriftCheck),
        Just(Experiment::RankCheck),
        Just(Experiment::InvariantCheck),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(exp in experiment(), seed in any::<u64>(), dt in 1e-4f64..0.1, horizon in 0.5f64..20.0,
                          n_paths in 1usize..100_000, bins in 2usize..200, k in 0.1f64..5.0,
                          x0 in prop::collection::vec(-10.0f64..10.0, 2), plot in any::<bool>(),
                          levy in any::<bool>(), alpha in 0.05f64..1.95) {
        let mut text = format!(
            "experiment = \"{}\"\nseed = {seed}\ndt = {dt:?}\nhorizon = {horizon:?}\nn_paths = {n_paths}\nbins = {bins}\nplot = {plot}\nx0 = [{:?}, {:?}]\n",
            exp.id(), x0[0], x0[1]
        );
        if levy {
            text += &format!("[model]\nname = \"levy-dissipative\"\nk = {k:?}\n[levy]\nalpha_index = {alpha:?}\n");
        } else {
            text += &format!("[model]\nname = \"example-e1\"\nk = {k:?}\n");
        }
        let raw = parse_unresolved(&text).unwrap();
        prop_assert_eq!(&parse_unresolved(&emit_config(&raw).unwrap()).unwrap(), &raw);
        let resolved = parse_config(&text).unwrap();
        let back = parse_config(&emit_config(&resolved).unwrap()).unwrap();
        prop_assert_eq!(back, resolved);
    }
}
