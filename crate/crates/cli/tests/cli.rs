use std::path::Path;
use std::process::{Command, Output};

use rdlcqr::io::{ErrorReport, EstimateReport};

fn rdlcqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdlcqr"))
        .args(args)
        .env_remove("RDLCQR_THREADS")
        .output()
        .expect("binary runs")
}

fn write_data(dir: &Path, with_t: bool) -> String {
    let path = dir.join("data.csv");
    let mut text = String::from(if with_t { "x,y,t\n" } else { "x,y\n" });
    let mut state = 12345u64;
    for i in 0..600 {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        let x = -1.0 + 2.0 * (i as f64 + 0.5) / 600.0;
        let t = if (x >= 0.0) == (u < 0.85) { 1 } else { 0 };
        let y = 0.4 + 0.5 * x + 0.1 * t as f64 + 0.2 * (u - 0.5);
        if with_t {
            text.push_str(&format!("{x},{y},{t}\n"));
        } else {
            text.push_str(&format!("{x},{y}\n"));
        }
    }
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_files_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for threads in ["1", "3", "8"] {
        let out = dir.path().join(format!("mc_{threads}.csv"));
        let o = rdlcqr(&[
            "simulate",
            "--model",
            "lm",
            "--dgp",
            "2",
            "--hetero",
            "--n",
            "300",
            "--reps",
            "30",
            "--seed",
            "7",
            "--estimators",
            "cqr,cqr-bc,llr",
            "--fixed-n",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push(std::fs::read(&out).unwrap());
    }
    assert!(files.windows(2).all(|w| w[0] == w[1]));
    let text = String::from_utf8(files.remove(0)).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("cqr,lm,2,true,300,"));
}

#[test]
fn thread_count_from_environment() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_rdlcqr"))
            .args(["simulate", "--reps", "12", "--n", "250", "--format", "json"])
            .env("RDLCQR_THREADS", threads)
            .output()
            .unwrap()
    };
    let a = run("1");
    let b = run("4");
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn estimate_json_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), true);
    let o = rdlcqr(&["estimate", "--input", &data, "--bandwidth", "0.4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: EstimateReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep.schema, 1);
    assert_eq!(rep.n, 600);
    assert_eq!(rep.result.bandwidths.h_plus, 0.4);

    let o = rdlcqr(&[
        "estimate",
        "--input",
        &data,
        "--design",
        "fuzzy",
        "--t",
        "t",
        "--tau0",
        "-0.2",
        "--invert-ci",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: EstimateReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep.result.tau0, -0.2);
    assert!(rep.fuzzy.unwrap().inverted_ci.is_some());
}

#[test]
fn missing_treatment_column_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), false);
    let o = rdlcqr(&[
        "estimate", "--input", &data, "--design", "fuzzy", "--t", "t",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: ErrorReport = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err.code, "missing_column");
    assert!(o.stdout.is_empty());
}

#[test]
fn unreadable_input_fails_with_nonzero_exit() {
    let o = rdlcqr(&["estimate", "--input", "/nonexistent/data.csv"]);
    assert_ne!(o.status.code(), Some(0));
    let err: ErrorReport = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err.exit_code, o.status.code().unwrap());
}

#[test]
fn bad_flag_values_are_rejected() {
    assert!(!rdlcqr(&["estimate", "--bandwidth", "wide"])
        .status
        .success());
    assert!(!rdlcqr(&["simulate", "--estimators", "ols"])
        .status
        .success());
}

#[test]
fn are_table_markdown() {
    let o = rdlcqr(&["are", "--laws", "1,2", "--qs", "1,5", "--format", "md"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("1.741101"));
}

#[test]
fn plotdata_writes_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), false);
    let out = dir.path().join("plots");
    let o = rdlcqr(&["plotdata", "--input", &data, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["bins.csv", "fit.csv", "sweep.csv"] {
        assert!(out.join(f).exists());
    }
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 39);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), false);
    let cfg = dir.path().join("job.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"input": "{data}", "bandwidth": "0.5", "q": 5, "kernel": "epanechnikov"}}"#),
    )
    .unwrap();
    let o = rdlcqr(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("0.500000"));
}
