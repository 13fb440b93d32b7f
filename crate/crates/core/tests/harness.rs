mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::*;
use kfdiag::diagnosis::{read_verdicts_csv, Outcome};
use kfdiag::harness::{
    emit_plot_data, replay, run_experiment, Experiment, ExperimentConfig, KindName, ReplaySettings, OUTPUT_DIR_ENV,
};
use kfdiag::linalg::{Matrix, Vector};
use kfdiag::model::{parse_model, render_model, SystemModel};
use kfdiag::scenario::write_scenario_csv;

const SMALL: &str = r#"
[model]
builder = "swing"

[scenario]
kinds = ["normal", "malicious", "model_error"]
steps = 300
seed = 77

[scenario.attack]
channels = [5]
window = [100, 200]

[scenario.fault]
onset = 100
removed_line = [5, 7]

[diagnosis.calibration]
runs = 60

[batch]
num_seeds = 6
"#;

fn small_experiment(seeds: usize) -> Experiment {
    let cfg = ExperimentConfig::from_toml_str(SMALL, &[format!("batch.num_seeds={seeds}")]).unwrap();
    Experiment::resolve(cfg, Path::new(".")).unwrap()
}

fn config_path(name: &str) -> PathBuf {
    workspace_root().join("configs").join(name)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn kfdiag() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kfdiag"))
}

#[test]
fn normal_batch_keeps_quiet() {
    let exp = Experiment::load(&config_path("normal.toml"), &[]).unwrap();
    let report = run_experiment(&exp, None).unwrap();
    let row = report.confusion_row(KindName::Normal).unwrap();
    assert_eq!(row.total(), 50);
    assert!(row.get(Outcome::NoAnomaly) >= 48, "{row:?}");
    assert_eq!(report.runs.len(), 50);
}

#[test]
fn identical_configs_write_identical_artifacts() {
    let exp = small_experiment(3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&exp, Some(a.path())).unwrap();
    run_experiment(&exp, Some(b.path())).unwrap();
    let files = files_under(a.path());
    assert_eq!(files, files_under(b.path()));
    assert!(files.len() >= 3 * 3 * 3 + 2);
    for f in files.iter().filter(|f| !f.ends_with("runtime.json")) {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn artifacts_carry_the_config_hash_and_seed() {
    let exp = small_experiment(1);
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&exp, Some(dir.path())).unwrap();
    for f in files_under(dir.path()) {
        let text = fs::read_to_string(dir.path().join(&f)).unwrap();
        if f.extension().is_some_and(|e| e == "json") {
            continue;
        }
        let first = text.lines().next().unwrap();
        assert!(first.starts_with('#'), "{}", f.display());
        assert!(first.contains(&format!("config_hash={}", report.config_hash)), "{}", f.display());
        assert!(first.contains("seed="), "{}", f.display());
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config_hash"], report.config_hash.as_str());
}

#[test]
fn confusion_rows_sum_to_the_seed_count() {
    let report = run_experiment(&small_experiment(6), None).unwrap();
    for row in &report.confusion {
        assert_eq!(row.majority.total(), 6);
    }
    assert_eq!(report.false_alarm_rate, Some(0.0));
    assert_eq!(report.missed_detection_rate, Some(0.0));
}

#[test]
fn replayed_trace_reproduces_the_in_process_timeline() {
    let exp = small_experiment(1);
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&exp, Some(dir.path())).unwrap();
    let settings = ReplaySettings::from_sources(Some(SMALL), &[]).unwrap();
    for (i, run) in report.runs.iter().enumerate() {
        let seed_dir = dir.path().join(format!("{}/seed_0", run.kind.as_str()));
        let trace = fs::read_to_string(seed_dir.join("scenario.csv")).unwrap();
        let replayed = replay(&trace, &exp.assumed, &settings).unwrap();
        assert_eq!(replayed.verdicts, report.timelines[i], "{}", run.kind.as_str());
    }

    // The CLI writes the same rows.
    let out = dir.path().join("replayed.csv");
    let cfg_file = dir.path().join("exp.toml");
    fs::write(&cfg_file, SMALL).unwrap();
    let status = kfdiag()
        .arg("replay")
        .arg(dir.path().join("malicious/seed_0/scenario.csv"))
        .arg(dir.path().join("assumed_model.txt"))
        .arg("--config")
        .arg(&cfg_file)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let cli_rows = read_verdicts_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    let lib_rows = read_verdicts_csv(&fs::read_to_string(dir.path().join("malicious/seed_0/verdicts.csv")).unwrap()).unwrap();
    assert_eq!(cli_rows, lib_rows);
}

#[test]
fn truncated_trace_row_is_reported_by_line() {
    let exp = small_experiment(1);
    let run = exp.run_single(KindName::Normal, 0).unwrap();
    let mut buf = Vec::new();
    write_scenario_csv(&run.run, &mut buf, None).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cut = lines[5].rfind(',').unwrap();
    lines[5].truncate(cut);
    let err = replay(&lines.join("\n"), &exp.assumed, &ReplaySettings::default()).unwrap_err().to_string();
    assert!(err.contains("line 6"), "{err}");

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let col = lines.iter().find(|l| l.starts_with("k,")).unwrap().split(',').position(|h| h == "z_delivered_1").unwrap();
    let mut cells: Vec<&str> = lines[3].split(',').collect();
    cells[col] = "abc";
    lines[3] = cells.join(",");
    let bad_cell = lines.join("\n");
    let err = replay(&bad_cell, &exp.assumed, &ReplaySettings::default()).unwrap_err().to_string();
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn stale_model_replay_flags_modeling_error_after_the_fault() {
    let exp = small_experiment(1);
    let dir = tempfile::tempdir().unwrap();
    let plant = exp.faulted.clone().unwrap();

    // A clean trace of the post-fault grid, diagnosed with the stale model.
    let (_, z) = kfdiag::scenario::simulate_trajectory(&plant, &exp.x0, 300, 123).unwrap();
    let mut csv = String::from("k");
    for i in 1..=z.ncols() {
        csv.push_str(&format!(",z_{i}"));
    }
    csv.push('\n');
    for k in 0..z.nrows() {
        csv.push_str(&k.to_string());
        for v in z.row(k).iter() {
            csv.push_str(&format!(",{v:e}"));
        }
        csv.push('\n');
    }
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, csv).unwrap();
    let model_file = dir.path().join("stale.txt");
    fs::write(&model_file, render_model(&exp.assumed)).unwrap();
    let out = dir.path().join("v.csv");
    let cfg_file = dir.path().join("exp.toml");
    fs::write(&cfg_file, SMALL).unwrap();
    let status = kfdiag()
        .args(["replay"])
        .arg(&trace)
        .arg(&model_file)
        .arg("--config")
        .arg(&cfg_file)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let rows = read_verdicts_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    let late: Vec<_> = rows.iter().filter(|r| r.k >= 100).collect();
    let me = late.iter().filter(|r| r.outcome == Outcome::ModelingError).count();
    assert!(2 * me > late.len(), "{me} of {}", late.len());
}

#[test]
fn missing_model_file_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "[model]\nbuilder = \"file\"\npath = \"models/absent.txt\"\n").unwrap();
    let out = kfdiag().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("models/absent.txt"));

    let out = kfdiag().arg("replay").arg("nothing.csv").arg(dir.path().join("gone.txt")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gone.txt"));
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "[model]\nbuilder = \"swing\"\n\n[detector]\nconfidnce = 0.9\n").unwrap();
    let out = kfdiag().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("confidnce") && err.contains("line 5"), "{err}");
}

#[test]
fn numerical_failure_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let model = SystemModel::new(
        Matrix::identity(2, 2),
        Matrix::zeros(2, 2),
        Matrix::zeros(2, 2),
        Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1e-14])),
    )
    .unwrap();
    let model_file = dir.path().join("m.txt");
    fs::write(&model_file, render_model(&model)).unwrap();
    let trace = dir.path().join("t.csv");
    fs::write(&trace, "z_1,z_2\n0,0\n1,1\n").unwrap();
    let out = kfdiag()
        .arg("replay")
        .arg(&trace)
        .arg(&model_file)
        .args(["--set", "diagnosis.th_d=1.0", "--set", "scenario.p0_scale=0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn environment_variable_sets_the_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL.replace("num_seeds = 6", "num_seeds = 1")).unwrap();
    let target = dir.path().join("from_env");
    let out = kfdiag().arg("run").arg(&cfg).env(OUTPUT_DIR_ENV, &target).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("report.json").exists());
    assert!(target.join("normal/seed_0/verdicts.csv").exists());
}

#[test]
fn plot_data_has_the_documented_schema() {
    let exp = small_experiment(1);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&exp, Some(dir.path())).unwrap();
    let plot = dir.path().join("plot");
    let written = emit_plot_data(dir.path(), 0, &plot).unwrap();
    assert_eq!(written.len(), 7);

    let d_compare = fs::read_to_string(plot.join("d_compare.csv")).unwrap();
    let header = d_compare.lines().nth(1).unwrap();
    assert_eq!(header, "k,d_normal,d_malicious,d_model_error,TH_d");
    assert_eq!(d_compare.lines().count(), 2 + 300);

    let residuals = fs::read_to_string(plot.join("residuals_malicious.csv")).unwrap();
    let mut lines = residuals.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + exp.assumed.m() + 1);
    assert_eq!(*header.last().unwrap(), "TH_r");
    let th: Vec<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(th.len(), 300);
    assert!(th.iter().all(|t| *t == th[0]));

    let chi2 = fs::read_to_string(plot.join("chi2_normal.csv")).unwrap();
    assert_eq!(chi2.lines().nth(1).unwrap(), "k,c,TH_chi");

    let model = parse_model(&fs::read_to_string(dir.path().join("assumed_model.txt")).unwrap()).unwrap();
    assert!(model.max_abs_diff(&exp.assumed) == 0.0);
}

#[test]
fn malicious_d_stays_below_model_error_d_in_the_attack_window() {
    let exp = small_experiment(9);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&exp, Some(dir.path())).unwrap();
    let mut fractions = Vec::new();
    for seed in 0..9 {
        let plot = dir.path().join(format!("plot_{seed}"));
        emit_plot_data(dir.path(), seed, &plot).unwrap();
        let text = fs::read_to_string(plot.join("d_compare.csv")).unwrap();
        let mut below = 0usize;
        for line in text.lines().skip(2) {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            if (100..=200).contains(&(cells[0] as usize)) && cells[2] < cells[3] {
                below += 1;
            }
        }
        fractions.push(below as f64 / 101.0);
    }
    let med = median(&mut fractions);
    println!("median fraction of attack-window steps with d_malicious < d_model_error: {med:.3}");
    assert!(med > 0.5, "median fraction {med}");
}
