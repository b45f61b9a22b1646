use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn zoomctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zoomctl"))
        .args(args)
        .env_remove("ZOOMCTL_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn conf(name: &str) -> String {
    configs().join(name).display().to_string()
}

/// Reference constants with a lighter ensemble.
const LIGHT: [&str; 4] = ["--set", "trials=64", "--set", "horizon=1000"];

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[test]
fn simulate_reference_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let reference = conf("reference.conf");
    let mut args = vec!["simulate", &reference, "--out", &out, "--keep-traces", "2"];
    args.extend(LIGHT);
    let o = zoomctl(&args);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("stable"));
    for f in ["summary.json", "curve.csv", "trace_0000.csv", "trace_0001.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("trace_0002.csv").exists());

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "stable");
    assert_eq!(summary["config"]["trials"], 64);
    assert!(summary["resolved"].as_array().unwrap().iter().any(|l| l == "L = 8098920141276734029824"));

    let curve = data_lines(&dir.path().join("curve.csv"));
    assert_eq!(curve[0], "n,mean,stderr");
    assert_eq!(curve.len(), 1 + 1001);
    let head = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(head.starts_with("# zoomctl"));
    assert!(head.contains("# M0 = 4\n"));

    // Trace files carry provenance and still read back.
    let trace = dir.path().join("trace_0001.csv");
    let rows = zoomctl_core::control::read_trace_csv(fs::File::open(&trace).unwrap()).unwrap();
    assert_eq!(rows.len(), 1001);
}

#[test]
fn simulate_without_traces_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stress = conf("stress.conf");
    for dir in [&a, &b] {
        let out = dir.path().display().to_string();
        let o = zoomctl(&[
            "simulate", &stress, "--out", &out, "--keep-traces", "0", "--set", "trials=40", "--set", "horizon=1000",
        ]);
        assert!([0, 2, 3].contains(&code(&o)), "{}", stderr(&o));
        assert!(stderr(&o).contains("not feasible"), "stress constants are infeasible: {}", stderr(&o));
        let mut names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names, ["curve.csv", "summary.json"]);
    }
    for f in ["summary.json", "curve.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unstabilizable_config_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let reference = conf("reference.conf");
    let o = zoomctl(&["simulate", &reference, "--out", &out, "--set", "A.stddev=1.1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not second-moment stabilizable"), "{}", stderr(&o));
    let o = zoomctl(&["feasibility", &reference, "--set", "A.stddev=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not second-moment stabilizable"));
}

#[test]
fn config_errors_cite_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    let text = fs::read_to_string(configs().join("stress.conf")).unwrap().replace("K = 2", "Kappa = 2");
    fs::write(&path, text).unwrap();
    let o = zoomctl(&["feasibility", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.conf:16: unknown key \"Kappa\""), "{}", stderr(&o));
}

#[test]
fn verify_reference_all_checks() {
    let reference = conf("reference.conf");
    let o = zoomctl(&["verify", &reference, "--set", "trials=128", "--set", "horizon=1000"]);
    let text = stdout(&o);
    assert_eq!(code(&o), 0, "{text}{}", stderr(&o));
    for check in ["domination", "drift", "containment", "tracker_equality", "oracle_match"] {
        assert!(text.lines().any(|l| l.starts_with(check) && l.contains("PASS")), "{check}: {text}");
    }
}

#[test]
fn verify_selected_check_only() {
    let stress = conf("stress.conf");
    let o = zoomctl(&["verify", &stress, "--checks", "domination", "--set", "trials=16", "--set", "horizon=500"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("domination  PASS"));
}

#[test]
fn verify_drift_needs_trials() {
    let stress = conf("stress.conf");
    let o = zoomctl(&["verify", &stress, "--checks", "drift", "--set", "trials=50"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("need at least 100"), "{}", stderr(&o));
}

#[test]
fn verify_corrupted_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let stress = conf("stress.conf");
    let o = zoomctl(&[
        "simulate", &stress, "--out", &out, "--keep-traces", "1", "--set", "trials=1", "--set", "horizon=300",
    ]);
    assert!(code(&o) != 1, "{}", stderr(&o));
    let trace = dir.path().join("trace_0000.csv");
    let trace_arg = trace.display().to_string();

    let o = zoomctl(&["verify", &stress, "--trace", &trace_arg]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);

    // Bump the recorded control U on data row n = 120.
    let text = fs::read_to_string(&trace).unwrap();
    let mut seen = 0;
    let corrupted: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with('#') || l.starts_with('n') {
                return l.to_owned();
            }
            seen += 1;
            if seen - 1 != 120 {
                return l.to_owned();
            }
            let mut f: Vec<String> = l.split(',').map(str::to_owned).collect();
            let u: f64 = f[7].parse().unwrap();
            f[7] = (u + 0.5).to_string();
            f.join(",")
        })
        .collect();
    fs::write(&trace, corrupted.join("\n") + "\n").unwrap();
    let o = zoomctl(&["verify", &stress, "--trace", &trace_arg, "--checks", "tracker_equality"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("index 120"), "{}", stdout(&o));

    let o = zoomctl(&["verify", &stress, "--trace", &trace_arg, "--checks", "drift"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn feasibility_reference_and_negative_margin() {
    let reference = conf("reference.conf");
    let o = zoomctl(&["feasibility", &reference]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let field = |k: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(k).filter(|r| r.starts_with(' ')))
            .unwrap_or_else(|| panic!("{k} missing: {text}"))
            .trim()
            .parse()
            .unwrap()
    };
    assert_eq!(field("R"), 74.0);
    assert!(field("margin_drift") >= 0.0 && field("margin_k") >= 0.0);
    let json_start = text.find('{').unwrap();
    let json: serde_json::Value = serde_json::from_str(&text[json_start..]).unwrap();
    assert_eq!(json["report"]["ok"], true);

    let o = zoomctl(&["feasibility", &reference, "--set", "L=1", "--set", "P=100"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = zoomctl(&["feasibility", &reference, "--set", "alpha=4"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn feasibility_search_recovers_reference_constants() {
    let reference = conf("reference.conf");
    let o = zoomctl(&["feasibility", &reference, "--search", "0.05", "--set", "L=1", "--set", "P=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("P = 753769176810394100000\n"), "{text}");
    assert!(text.contains("L = 8098920141276734029824\n"), "{text}");
}

#[test]
fn sweep_levels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let stress = conf("stress.conf");
    let light = ["--set", "trials=8", "--set", "horizon=200"];
    let mut args = vec!["sweep", &stress, "--dim", "L", "--values", "1,2,8", "--out", &out];
    args.extend(light);
    let o = zoomctl(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = data_lines(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    let header: Vec<&str> = rows[0].split(',').collect();
    let r_col = header.iter().position(|&h| h == "R").unwrap();
    let rates: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(r_col).unwrap()).collect();
    assert_eq!(rates, ["2", "3", "5"]);

    let mut args = vec!["sweep", &stress, "--dim", "P", "--values", "2", "--out", &out];
    args.extend(light);
    assert_eq!(code(&zoomctl(&args)), 0);
    assert_eq!(data_lines(&dir.path().join("sweep.csv")).len(), 2);

    for (dim, values) in [("L", ""), ("Q", "1")] {
        let mut args = vec!["sweep", &stress, "--dim", dim, "--values", values, "--out", &out];
        args.extend(light);
        assert_eq!(code(&zoomctl(&args)), 1, "dim {dim} values {values:?}");
    }
}

#[test]
fn rate_command() {
    for (l, r) in [("1", "2"), ("2", "3"), ("4", "4"), ("8", "5"), ("16", "6")] {
        let o = zoomctl(&["rate", l]);
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o).trim(), r);
    }
    assert_eq!(code(&zoomctl(&["rate", "0"])), 1);
    assert_eq!(code(&zoomctl(&["rate", "x"])), 1);
    assert_eq!(code(&zoomctl(&["bogus"])), 1);
}

#[test]
fn thread_cap_from_environment() {
    let stress = conf("stress.conf");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_zoomctl"))
            .args(["verify", &stress, "--checks", "domination", "--set", "trials=8", "--set", "horizon=100"])
            .env("ZOOMCTL_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    let o = run("0");
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ZOOMCTL_THREADS"));
}
