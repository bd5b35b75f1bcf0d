use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use approx::assert_relative_eq;
use proptest::prelude::*;
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn echo4(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echo4")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

/// Small, fast variant of the spin-storage config.
const SMALL: &[&str] = &["--set", "ensemble.n_classes=8", "--set", "ensemble.hyperfine_nodes=2", "--set", "sweep.tb=[0,4e-6]"];

#[test]
fn validate_accepts_every_shipped_config() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_owned();
        if !name.ends_with(".json") || name.starts_with("phasematch") {
            continue;
        }
        let out = echo4(&["validate", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("config ok, sha256"));
    }
}

#[test]
fn config_errors_exit_2() {
    let spin_storage = config("spin_storage.json");
    for set in ["sweep.tb=[]", "sweep.nope=[1e-6]", "ensemble.n_classes=0", "bogus=1"] {
        let out = echo4(&["simulate", &spin_storage, "--set", set]);
        assert_eq!(out.status.code(), Some(2), "{set}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    }
    assert_eq!(echo4(&["validate", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn unreachable_depth_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = echo4(&[
        "prepare",
        &config("feature.json"),
        "--set",
        "preparation.target_alpha_l=1000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prepare_reports_requested_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = echo4(&["prepare", &config("feature.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_relative_eq!(v["achieved_alpha_l"].as_f64().unwrap(), std::f64::consts::LN_2, max_relative = 1e-3);
    for f in ["grid.csv", "feature.csv", "medium.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

fn write_csv(dir: &Path, rows: impl Iterator<Item = (f64, f64)>) -> String {
    let p = dir.join("points.csv");
    let mut text = String::from("delay_s,amplitude\n");
    for (x, y) in rows {
        text.push_str(&format!("{x:e},{y:e}\n"));
    }
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn fit_recovers_decay_and_flags_misfit() {
    let dir = tempfile::tempdir().unwrap();
    let gauss = write_csv(dir.path(), (1..=12).map(|k| {
        let t = 5e-6 * k as f64;
        (t, (-(t / 30e-6).powi(2)).exp())
    }));
    let ok = echo4(&["fit", &gauss, "--model", "gaussian"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(!json(&ok)["misfit"].as_bool().unwrap());

    let bad = echo4(&["fit", &gauss, "--model", "exponential"]);
    assert_eq!(bad.status.code(), Some(4), "{}", String::from_utf8_lossy(&bad.stdout));
    assert!(json(&bad)["misfit"].as_bool().unwrap());

    let exp = write_csv(dir.path(), (1..=8).map(|k| (10e-6 * k as f64, 0.3 * (-(10e-6 * k as f64) / 75e-6).exp())));
    let v = json(&echo4(&["fit", &exp, "--x", "delay_s", "--y", "amplitude"]));
    let t2 = v["fit"]["params"].as_array().unwrap().iter().find(|p| p["name"] == "t2_s").unwrap()["value"].as_f64().unwrap();
    assert_relative_eq!(t2, 75e-6, max_relative = 1e-6);
}

#[test]
fn phasematch_penalties() {
    let v = json(&echo4(&["phasematch", &config("phasematch_collinear.json")]));
    assert_relative_eq!(v["penalty"].as_f64().unwrap(), 1.0, epsilon = 1e-9);
    let v = json(&echo4(&["phasematch", &config("phasematch_offaxis.json")]));
    assert!(v["penalty"].as_f64().unwrap() < 0.01);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_independent_of_thread_count() {
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("spin_storage.json");
        let mut args = vec!["simulate", &cfg, "--threads", threads, "--out", dir.path().to_str().unwrap()];
        args.extend_from_slice(SMALL);
        let out = echo4(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let v = json(&out);
        assert_eq!(v["points"].as_array().unwrap().len(), 2);
        tree(dir.path())
    };
    let a = run("1");
    assert!(a.iter().any(|(n, _)| n == "manifest.json"));
    assert!(a.iter().any(|(n, _)| n == "sweep.csv"));
    assert_eq!(a, run("2"));
}

#[test]
fn manifest_records_seed_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = config("spin_storage.json");
    let mut args = vec!["simulate", &cfg, "--seed", "42", "--out", d];
    args.extend_from_slice(SMALL);
    assert_eq!(echo4(&args).status.code(), Some(0));
    let m: Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 42);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["files"].as_object().unwrap().contains_key("sweep.csv"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn number_format_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
        let s = echo4::output::num(v);
        prop_assert_eq!(s.parse::<f64>().unwrap(), if v == 0.0 { 0.0 } else { v });
    }

    #[test]
    fn overrides_set_nested_values(a in 1u32..1000, b in -1e3f64..1e3) {
        let mut root = serde_json::json!({});
        echo4::config::set_path(&mut root, "x.y", serde_json::json!(a)).unwrap();
        let (k, v) = echo4::config::parse_override(&format!("x.z={b:e}")).unwrap();
        echo4::config::set_path(&mut root, &k, v).unwrap();
        prop_assert_eq!(root["x"]["y"].as_u64(), Some(a as u64));
        prop_assert_eq!(root["x"]["z"].as_f64(), Some(b));
    }
}
