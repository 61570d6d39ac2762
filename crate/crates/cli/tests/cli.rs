use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::{json, Value};

fn workdir(tag: &str) -> PathBuf {
    static N: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir()
        .join(format!("chrono-lens-cli-{}", std::process::id()))
        .join(format!("{tag}-{}", N.fetch_add(1, Ordering::SeqCst)));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A flat 1+2 scenario small enough to run in seconds.
fn small() -> Value {
    json!({
        "name": "small",
        "seed": 1,
        "metric": {"family": "minkowski", "dim": 3, "domain": [[-4.0, 4.0], [-4.0, 4.0], [-4.0, 4.0]]},
        "observers": {"center": [0.0, 0.0, 0.0], "velocity": [1.0, 0.0, 0.0], "h_hat": 1.0, "count": 8, "s_range": [-2.5, 2.5]},
        "schedule": {"s_minus2": -2.2, "s_minus1": -0.5, "s_plus1": 1.2, "s_plus2": 2.4},
        "sources": {"region": [[-0.2, 0.2], [-0.4, 0.4], [-0.4, 0.4]], "targets": 2, "fill": 2},
        "forward": {"dir_count": 128},
        "gates": {"median_max": 0.01, "max_max": 0.05, "min_targets": 2}
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.in.json");
    std::fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str], config: Option<&Path>, out: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_chrono-lens"));
    cmd.args(args).arg("--out").arg(out).env_remove("CHRONO_LENS_JOBS");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn validate_echoes_defaults() {
    let dir = workdir("validate");
    let o = run(&["validate"], Some(&write_config(&dir, &small())), &dir.join("out"), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["forward"]["dir_count"], 128);
    assert!(v["forward"]["sweep_tol"].is_number());
    assert!(v["reconstruction"]["kappa_max"].is_number());
    assert_eq!(v["observers"]["velocity_scale"], 0.0);
}

#[test]
fn invalid_configs_exit_3() {
    let dir = workdir("invalid");
    let mut unknown = small();
    unknown["metric"]["family"] = json!("kerr");
    let o = run(&["validate"], Some(&write_config(&dir, &unknown)), &dir.join("out"), &[]);
    assert_eq!(code(&o), 3);

    // sources reaching into the past of p⁻
    let mut early = small();
    early["schedule"]["s_minus1"] = json!(0.3);
    let o = run(&["forward"], Some(&write_config(&dir, &early)), &dir.join("out"), &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let mut wave: Value = serde_json::from_slice(&std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/wave_standard.json")).unwrap()).unwrap();
    wave["wave"]["expansion"]["grid"]["k"] = json!(0.02);
    let o = run(&["wave"], Some(&write_config(&dir, &wave)), &dir.join("out"), &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["validate"], Some(&dir.join("missing.json")), &dir.join("out"), &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn empty_source_list_gives_meta_only_dataset() {
    let dir = workdir("empty");
    let mut cfg = small();
    cfg["sources"]["targets"] = json!(0);
    cfg["sources"]["fill"] = json!(0);
    let out = dir.join("out");
    assert_eq!(code(&run(&["forward"], Some(&write_config(&dir, &cfg)), &out, &[])), 0);
    let text = std::fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("{\"meta\""));

    // reconstructing nothing fails the target-count gate; plots still emit headers
    assert_eq!(code(&run(&["reconstruct"], Some(&write_config(&dir, &cfg)), &out, &[])), 2);
    assert_eq!(code(&run(&["plots"], None, &out, &[])), 0);
    for f in ["arrival_surface.csv", "cone_sections.csv"] {
        let body = std::fs::read_to_string(out.join("plots").join(f)).unwrap();
        assert_eq!(body.lines().count(), 1, "{f}");
    }
}

#[test]
fn plots_without_inputs_exit_4() {
    let dir = workdir("plots");
    assert_eq!(code(&run(&["plots"], None, &dir.join("nothing"), &[])), 4);
}

#[test]
fn same_seed_is_byte_identical_and_thread_count_free() {
    let dir = workdir("determinism");
    let cfg = write_config(&dir, &small());
    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    assert_eq!(code(&run(&["forward", "--jobs", "1"], Some(&cfg), &a, &[])), 0);
    assert_eq!(code(&run(&["forward"], Some(&cfg), &b, &[("CHRONO_LENS_JOBS", "3")])), 0);
    assert_eq!(code(&run(&["forward", "--seed", "2"], Some(&cfg), &c, &[])), 0);
    for f in ["dataset.jsonl", "truth.json", "config.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("truth.json")).unwrap(), std::fs::read(c.join("truth.json")).unwrap());
}

#[test]
fn hash_mismatch_truth_withheld_and_gates() {
    let dir = workdir("reconstruct");
    let cfg = write_config(&dir, &small());
    let out = dir.join("out");
    assert_eq!(code(&run(&["forward"], Some(&cfg), &out, &[])), 0);

    let o = run(&["reconstruct", "--seed", "7"], Some(&cfg), &out, &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["reconstruct", "--seed", "7", "--force"], Some(&cfg), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["reconstruct"], Some(&cfg), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["summary"]["truth_available"], true);
    assert_eq!(rep["summary"]["evaluated"], 2);

    let mut strict = small();
    strict["gates"]["median_max"] = json!(0.0);
    // stricter gates change the hash, so the dataset is reused deliberately
    assert_eq!(code(&run(&["reconstruct", "--force"], Some(&write_config(&workdir("strict"), &strict)), &out, &[])), 2);

    std::fs::remove_file(out.join("truth.json")).unwrap();
    let o = run(&["reconstruct"], Some(&cfg), &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["summary"]["truth_available"], false);
    assert_eq!(rep["summary"]["ok"], 2);
    assert!(rep["summary"]["median_distance"].is_null());
}

#[test]
fn flat_arrival_surface_is_a_cone() {
    let dir = workdir("cone");
    let cfg = write_config(&dir, &small());
    let out = dir.join("out");
    assert_eq!(code(&run(&["forward"], Some(&cfg), &out, &[])), 0);
    assert_eq!(code(&run(&["plots"], None, &out, &[])), 0);
    let truth = read_json(&out.join("truth.json"));
    let meta_line = std::fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    let meta: Value = serde_json::from_str(meta_line.lines().next().unwrap()).unwrap();
    let members = meta["meta"]["grid"]["members"].as_array().unwrap();
    let csv = std::fs::read_to_string(out.join("plots/arrival_surface.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (src, obs, s): (usize, usize, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        let q: Vec<f64> = truth["sources"][src]["x"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let z: Vec<f64> = members[obs]["z"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(truth["sources"][src]["id"], src);
        let dist = ((z[1] - q[1]).powi(2) + (z[2] - q[2]).powi(2)).sqrt();
        assert!((s - (q[0] + dist - z[0])).abs() < 1e-7, "source {src} observer {obs}: s {s}");
        rows += 1;
    }
    assert!(rows > 8);
}
