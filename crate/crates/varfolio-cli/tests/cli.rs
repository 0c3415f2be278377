//! Binary-level tests: exit codes, file outputs, and determinism of the
//! command-line surface.

use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use varfolio::{build_rule, PortfolioRule, RiskFree, VarModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_varfolio"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Two assets, no predictors, mild persistence.
fn sample_model() -> VarModel {
    VarModel::new(
        2,
        0,
        DVector::from_vec(vec![0.002, 0.004]),
        DMatrix::from_row_slice(2, 2, &[0.2, -0.1, 0.05, 0.3]),
        DMatrix::from_row_slice(2, 2, &[4e-4, 5e-5, 5e-5, 9e-4]),
    )
    .unwrap()
}

fn write_series_csv(model: &VarModel, rows: usize, seed: u64, path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = model.default_y0();
    let path_states = model.simulate_path(&y0, rows - 1, &mut rng).unwrap();
    let mut text = String::from("asset_a,asset_b\n");
    for s in &path_states {
        text.push_str(&format!("{},{}\n", s.vector()[0], s.vector()[1]));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn fit_recovers_simulated_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let truth = sample_model();
    let csv = dir.path().join("returns.csv");
    write_series_csv(&truth, 4_000, 9, &csv);
    let model_path = dir.path().join("model.txt");
    let out = run(&[
        "fit",
        "--input",
        csv.to_str().unwrap(),
        "--k",
        "2",
        "--p",
        "0",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let fitted = VarModel::load(&model_path).unwrap();
    assert_eq!(fitted.k(), 2);
    assert_eq!(fitted.p(), 0);
    for i in 0..2 {
        for j in 0..2 {
            assert!(
                (fitted.phi()[(i, j)] - truth.phi()[(i, j)]).abs() < 0.15,
                "phi({i},{j}) {} vs {}",
                fitted.phi()[(i, j)],
                truth.phi()[(i, j)]
            );
        }
    }
}

#[test]
fn fit_without_out_prints_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("returns.csv");
    write_series_csv(&sample_model(), 500, 2, &csv);
    let out = run(&["fit", "--input", csv.to_str().unwrap(), "--k", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let model = VarModel::from_text(&stdout(&out)).unwrap();
    assert_eq!(model.state_dim(), 2);
}

#[test]
fn fit_missing_input_names_path_and_exits_2() {
    let out = run(&["fit", "--input", "/no/such/file.csv", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/no/such/file.csv"), "stderr: {}", stderr(&out));
}

#[test]
fn fit_rejects_zero_k() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("returns.csv");
    write_series_csv(&sample_model(), 60, 3, &csv);
    let out = run(&["fit", "--input", csv.to_str().unwrap(), "--k", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_exits_1() {
    let out = run(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn weights_single_period_matches_direct_solve() {
    let dir = tempfile::tempdir().unwrap();
    let model = sample_model();
    let model_path = dir.path().join("model.txt");
    model.save(&model_path).unwrap();
    let rule_path = dir.path().join("rule.txt");
    let out = run(&[
        "weights",
        "--model",
        model_path.to_str().unwrap(),
        "--T",
        "1",
        "--alpha",
        "1.5",
        "--rf",
        "0.001",
        "--out",
        rule_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let table = stdout(&out);
    let data_rows: Vec<&str> = table
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("period"))
        .collect();
    assert_eq!(data_rows.len(), 1);

    let exported = PortfolioRule::load(&rule_path).unwrap();
    let direct = build_rule(&model, 1, &RiskFree::Constant(0.001), 1.5).unwrap();
    let (a_exp, d_exp) = exported.coefficients(0);
    let (a_dir, d_dir) = direct.coefficients(0);
    assert_eq!(a_exp, a_dir);
    assert_eq!(d_exp, d_dir);
}

#[test]
fn iid_rows_stay_proportional_across_periods() {
    let dir = tempfile::tempdir().unwrap();
    let model = sample_model();
    let model_path = dir.path().join("model.txt");
    model.save(&model_path).unwrap();
    let rule_path = dir.path().join("rule.txt");
    let out = run(&[
        "weights",
        "--model",
        model_path.to_str().unwrap(),
        "--T",
        "3",
        "--alpha",
        "1",
        "--rf",
        "0.002",
        "--variant",
        "iid",
        "--out",
        rule_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let rule = PortfolioRule::load(&rule_path).unwrap();
    let y = DVector::zeros(2);
    let u0 = rule.scaled(0, &y).unwrap();
    for s in 1..3 {
        // same direction every period; only the deterministic discount moves
        let us = rule.scaled(s, &y).unwrap();
        let dollars_ratio = rule.dollars(0, &y).unwrap()[0] / rule.dollars(s, &y).unwrap()[0];
        let discount_ratio = rule.discount(s) / rule.discount(0);
        assert!((dollars_ratio - discount_ratio).abs() < 1e-12);
        assert!((&us - &u0).amax() < 1e-15);
    }
}

#[test]
fn rate_schedule_file_is_read_and_length_checked() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.txt");
    sample_model().save(&model_path).unwrap();
    let rates_path = dir.path().join("rates.txt");
    std::fs::write(&rates_path, "# weekly deposit curve\n0.001\n0.003\n0.0\n").unwrap();
    let base = [
        "weights",
        "--model",
        model_path.to_str().unwrap(),
        "--alpha",
        "1",
        "--rf",
        rates_path.to_str().unwrap(),
    ];
    let mut covered = base.to_vec();
    covered.extend(["--T", "3"]);
    let out = run(&covered);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let mut short = base.to_vec();
    short.extend(["--T", "5"]);
    let out = run(&short);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("horizon"), "stderr: {}", stderr(&out));
}

#[test]
fn simulate_outputs_replay_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.txt");
    sample_model().save(&model_path).unwrap();
    let run_once = |sub: &str, threads: &str| {
        let out_dir = tempfile::tempdir().unwrap();
        let out = run(&[
            "simulate",
            "--model",
            model_path.to_str().unwrap(),
            "--T",
            "4,6",
            "--alpha",
            "1,2",
            "--reps",
            "1500",
            "--seed",
            "5",
            "--threads",
            threads,
            "--dump-samples",
            "--out",
            out_dir.path().join(sub).to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        let mut names: Vec<String> = std::fs::read_dir(out_dir.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        let mut blob = stdout(&out).into_bytes();
        for name in &names {
            blob.extend(std::fs::read(out_dir.path().join(sub).join(name)).unwrap());
        }
        (names, blob)
    };
    let (names_a, blob_a) = run_once("a", "1");
    let (names_b, blob_b) = run_once("b", "4");
    assert_eq!(names_a.len(), 8);
    assert_eq!(names_a, names_b);
    assert_eq!(blob_a, blob_b);
}

#[test]
fn compare_reports_probe_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.txt");
    sample_model().save(&model_path).unwrap();
    let out = run(&[
        "compare",
        "--model",
        model_path.to_str().unwrap(),
        "--T",
        "4",
        "--alpha",
        "1",
        "--reps",
        "800",
        "--seed",
        "5",
        "--probe",
        "0.9:1.1",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("probe [0.9, 1.1]:"), "stdout: {text}");
    assert!(text.contains("general="), "stdout: {text}");
    assert!(text.contains("iid="), "stdout: {text}");
}

#[test]
fn verify_prints_per_period_deviation() {
    let out = run(&["verify", "--k", "1", "--p", "1", "--T", "2", "--nodes", "24", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("period 0:"), "stdout: {text}");
    assert!(text.contains("period 1:"), "stdout: {text}");
    let overall = text
        .lines()
        .find(|l| l.starts_with("overall:"))
        .and_then(|l| l.split_whitespace().rev().nth(1).map(str::to_string))
        .unwrap();
    assert!(overall.parse::<f64>().unwrap() < 1e-6, "overall line: {text}");
}

#[test]
fn verify_refuses_oversized_state() {
    let out = run(&["verify", "--k", "2", "--p", "2", "--T", "5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("cost cap"), "stderr: {}", stderr(&out));
}

#[test]
fn weights_rejects_wrong_y0_length() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.txt");
    sample_model().save(&model_path).unwrap();
    let out = run(&[
        "weights",
        "--model",
        model_path.to_str().unwrap(),
        "--T",
        "2",
        "--alpha",
        "1",
        "--y0",
        "0.1,0.2,0.3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("y0"), "stderr: {}", stderr(&out));
}
