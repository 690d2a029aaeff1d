use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sparsecode(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsecode")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&sparsecode(
        &["gen-data", "--n", "8", "--m", "12", "--rho", "0.3", "--sigma", "1", "--lambda", "0.05", "--count", "40", "--seed", "3", "--output-dir", "ds"],
        dir,
    ));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparsecode(&["solve", "--dict", "d.mat"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(sparsecode(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(sparsecode(&["mc-verify", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(sparsecode(&["fig-layers", "--methods", "ista,adam"], dir.path()).status.code(), Some(2));
    assert_eq!(sparsecode(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparsecode(&["solve", "--dict", "missing.mat", "--data", "x.mat", "--lambda", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mat"));
    let out = sparsecode(&["fig-gap", "--depths", "3,1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    assert_eq!(sparsecode(&["run", "--config", "bad.json"], dir.path()).status.code(), Some(1));
}

#[test]
fn solve_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let csv = ok(&sparsecode(
        &["solve", "--dict", "ds/D.mat", "--data", "ds/X.mat", "--lambda", "0.05", "--method", "ista", "--iters", "100"],
        dir.path(),
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,cost,cost_gap,support_size");
    assert_eq!(lines.len(), 102);
    let gaps: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(gaps.iter().all(|g| *g >= -1e-9));
    assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12));

    ok(&sparsecode(
        &["solve", "--dict", "ds/D.mat", "--data", "ds/X.mat", "--lambda", "0.05", "--method", "fista", "--iters", "10", "--sample", "4", "--output-dir", "out"],
        dir.path(),
    ));
    assert_eq!(fs::read_to_string(dir.path().join("out/trace.csv")).unwrap().lines().count(), 12);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    ok(&sparsecode(
        &["train", "--data-dir", "ds", "--arch", "lista", "--depth", "2", "--steps", "40", "--batch-size", "16", "--eval-every", "10", "--output-dir", "tr"],
        dir.path(),
    ));
    for f in ["curve.csv", "summary.json", "model/model.json", "model/layer1_W_g.mat"] {
        assert!(dir.path().join("tr").join(f).exists(), "{f}");
    }
    let csv = ok(&sparsecode(&["eval", "--model", "tr/model", "--data-dir", "ds"], dir.path()));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][1], rows[1][1]), ("ista", "lista"));
    let ista: f64 = rows[0][3].parse().unwrap();
    let lista: f64 = rows[1][3].parse().unwrap();
    assert!(lista <= ista + 1e-12);

    let gap = ok(&sparsecode(&["gap", "--data-dir", "ds", "--iters", "7"], dir.path()));
    assert_eq!(gap.lines().count(), 1 + 8);
}

#[test]
fn mc_verify_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&sparsecode(&["mc-verify", "--seed", "42", "--output-dir", out], dir.path()));
    }
    for f in ["results.csv", "diagnostics.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("gap.json"),
        r#"{"experiment": "fig_gap", "lambda": 0.3, "gap": {"problems": 9, "iterations": 12}, "output_dir": "from_file"}"#,
    )
    .unwrap();
    ok(&sparsecode(&["fig-gap", "--config", "gap.json", "--problems", "3", "--seed", "7"], dir.path()));
    let resolved = fs::read_to_string(dir.path().join("from_file/config.resolved.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(v["lambda"], 0.3);
    assert_eq!(v["gap"]["problems"], 3);
    assert_eq!(v["gap"]["iterations"], 12);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["n"], 16);
    let traces = fs::read_to_string(dir.path().join("from_file/results.csv")).unwrap();
    assert_eq!(traces.lines().count(), 1 + 2 * 13);

    // `run` dispatches on the file's experiment field
    ok(&sparsecode(&["run", "--config", "gap.json", "--output-dir", "via_run", "--problems", "3", "--seed", "7"], dir.path()));
    assert_eq!(
        fs::read(dir.path().join("via_run/results.csv")).unwrap(),
        fs::read(dir.path().join("from_file/results.csv")).unwrap()
    );
}

#[test]
fn small_layers_experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "fig-adverse", "--n", "8", "--m", "12", "--rho", "0.3", "--sigma", "1", "--lambda", "0.05",
            "--depths", "1,2", "--methods", "ista,fista,lfista", "--steps", "20", "--batch-size", "8",
            "--eval-every", "5", "--test-size", "25", "--output-dir", out,
        ]
    };
    let first = ok(&sparsecode(&args("a"), dir.path()));
    ok(&sparsecode(&args("b"), dir.path()));
    assert_eq!(first.lines().count(), 1 + 3 * 3);
    for f in ["results.csv", "training.csv", "curves/rho0.3_lfista_d2.csv", "models/rho0.3_lfista_d2/layer0_W_m.mat"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}
