use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bsdeopt(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsdeopt"))
        .arg("--quiet")
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("BSDEOPT_THREADS")
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gexp_of_constant_under_zero_generator() {
    let d = tempfile::tempdir().unwrap();
    let o = bsdeopt(d.path(), &["gexp", "--gen", "zero", "--claim", "const:v=1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(report(d.path())["result"]["value"], 1.0);
}

#[test]
fn canned_examples_pass() {
    for which in ["1", "2", "3"] {
        let d = tempfile::tempdir().unwrap();
        let o = bsdeopt(d.path(), &["example", which, "--preset", "default"]);
        assert_eq!(o.status.code(), Some(0), "example {which}: {}", String::from_utf8_lossy(&o.stderr));
        let r = report(d.path());
        assert_eq!(r["result"]["passes"], true);
        assert!(d.path().join("solution.csv").exists());
    }
    let d = tempfile::tempdir().unwrap();
    let o = bsdeopt(d.path(), &["example", "2"]);
    assert_eq!(report(d.path())["result"]["case"], "tie");
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn corrupted_solution_fails_verification() {
    let d = tempfile::tempdir().unwrap();
    let o = bsdeopt(d.path(), &["example", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let sol = d.path().join("solution.csv");
    let text = fs::read_to_string(&sol).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let (idx, val) = lines[6].split_once(',').map(|(a, b)| (a.to_string(), b.parse::<f64>().unwrap())).unwrap();
    lines[6] = format!("{idx},{}", val + 0.05);
    fs::write(&sol, lines.join("\n") + "\n").unwrap();

    let v = tempfile::tempdir().unwrap();
    let args = [
        "verify",
        "--gen",
        "linear:r=0,theta=0.2",
        "--risk",
        "efun:u=square,b=0",
        "--budget",
        "1.05",
        "--mean-eq",
        "1",
        "--nonneg",
        "--solution",
        sol.to_str().unwrap(),
    ];
    let o = bsdeopt(v.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    let r = report(v.path());
    assert_eq!(r["result"]["passes"], false);
    assert!(r["result"]["residual_sup"].as_f64().unwrap() > 0.01);
}

#[test]
fn identical_config_gives_identical_report() {
    let d = tempfile::tempdir().unwrap();
    let args = ["example", "3"];
    bsdeopt(d.path(), &args);
    let first = fs::read(d.path().join("report.json")).unwrap();
    bsdeopt(d.path(), &args);
    let second = fs::read(d.path().join("report.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn report_config_replays_through_run() {
    let d = tempfile::tempdir().unwrap();
    let o = bsdeopt(
        d.path(),
        &["optimize", "--gen", "linear:r=0,theta=0.2", "--risk", "efun:u=square,b=0", "--budget", "0.95", "--mean-eq", "1", "--nonneg", "--seed", "5"],
    );
    assert_eq!(o.status.code(), Some(0));
    let first = fs::read(d.path().join("report.json")).unwrap();
    let cfg = report(d.path())["config"].clone();
    let cfg_path = d.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = bsdeopt(d.path(), &["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(d.path().join("report.json")).unwrap(), first);
}

#[test]
fn config_errors_name_the_field() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"command": "gexp", "claim": "const:v=1", "genrator": "zero"}"#).unwrap();
    let o = bsdeopt(d.path(), &["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("genrator"));

    fs::write(&bad, r#"{"command": "optimize", "risk": "var", "mean_ge": 1}"#).unwrap();
    let o = bsdeopt(d.path(), &["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`budget`"));

    let o = bsdeopt(d.path(), &["gexp", "--gen", "cubic:a=1", "--claim", "const:v=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generator"));

    let o = bsdeopt(d.path(), &["gexp", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tree_file_drives_other_commands() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(bsdeopt(d.path(), &["tree", "--steps", "3", "--dims", "2"]).status.code(), Some(0));
    let tree = d.path().join("tree.json");
    let s = tempfile::tempdir().unwrap();
    let o = bsdeopt(s.path(), &["solve", "--tree", tree.to_str().unwrap(), "--gen", "abs_z:kappa=0.1", "--claim", "brownian:coord=1"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(s.path());
    assert!((r["result"]["y0"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    let csv = fs::read_to_string(s.path().join("solution.csv")).unwrap();
    assert!(csv.starts_with("step,node,y,z0,z1\n"));
    assert_eq!(csv.lines().count(), 1 + 1 + 4 + 16 + 64);
}

#[test]
fn adjoint_and_ddq_agree() {
    let d = tempfile::tempdir().unwrap();
    let gen = "smooth_tanh:a=0.5,b=0.5";
    let o = bsdeopt(d.path(), &["adjoint", "--gen", gen, "--claim", "call:k=0"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(d.path());
    assert!(r["result"]["basis_check"]["duality_residual"].as_f64().unwrap() < 1e-12);
    assert!(d.path().join("q.csv").exists());

    let o = bsdeopt(d.path(), &["ddq", "--gen", gen, "--claim", "call:k=0", "--direction", "indicator:leaf=5"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(d.path());
    let v = r["result"]["value"].as_f64().unwrap();
    let p = r["result"]["representer_pairing"].as_f64().unwrap();
    assert!((v - p).abs() < 1e-4);

    let o = bsdeopt(d.path(), &["adjoint", "--gen", "abs_z:kappa=0.1", "--claim", "const:v=1", "--max-selections", "5"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(report(d.path())["result"]["selections"], 5);
}

#[test]
fn thread_count_from_flag_and_environment() {
    let d = tempfile::tempdir().unwrap();
    let meta = |dir: &Path| -> Value { serde_json::from_str(&fs::read_to_string(dir.join("meta.json")).unwrap()).unwrap() };
    let o = Command::new(env!("CARGO_BIN_EXE_bsdeopt"))
        .args(["--quiet", "--out", d.path().to_str().unwrap(), "gexp", "--claim", "const:v=1"])
        .env("BSDEOPT_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(meta(d.path())["threads"], 3);
    let o = bsdeopt(d.path(), &["--threads", "2", "gexp", "--claim", "const:v=1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(meta(d.path())["threads"], 2);
}
