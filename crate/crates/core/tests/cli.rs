use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cocoa-continual"))
}

fn write_config(dir: &Path, out: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        r#"
name = "tiny"
p = 24
partition = [4, 8, 12]
schedule = "cyclic"
repeats = 20
generator = "shared"
n_m = [1, 2, 4]
tasks = [2, 5]
seeds = 3
out = "{}"
{extra}
"#,
        out.display()
    );
    fs::write(&path, text).unwrap();
    path
}

/// File contents without the timestamped metadata line.
fn body(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let (first, rest) = text.split_once('\n').unwrap();
    assert!(first.starts_with("# "), "{first}");
    rest.to_string()
}

#[test]
fn sweep_writes_deterministic_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg_a = write_config(dir.path(), &out_a, "write_traces = true\nsvg = true");
    assert_eq!(bin().arg("run").arg(&cfg_a).status().unwrap().code(), Some(0));
    let cfg_b = write_config(dir.path(), &out_b, "write_traces = true\nsvg = true");
    let status = bin().args(["--threads", "1", "sweep"]).arg(&cfg_b).status().unwrap();
    assert_eq!(status.code(), Some(0));

    for file in ["summary.csv", "cells.csv", "traces/trace_n2_M5_seed1.csv"] {
        assert_eq!(body(&out_a.join(file)), body(&out_b.join(file)), "{file}");
    }
    assert!(out_a.join("heatmap_forgetting.svg").exists());

    let cells = body(&out_a.join("cells.csv"));
    let mut lines = cells.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n_m,M,status,seeds,diverged_seeds,median_forgetting,median_rel_step,median_dist,reason"
    );
    let keys: Vec<(String, String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].to_string())
        })
        .collect();
    assert_eq!(keys.len(), 6, "each (n_m, M) cell appears exactly once");
    let skipped: Vec<_> = keys.iter().filter(|k| k.2 == "skipped").collect();
    assert_eq!(skipped.len(), 2);
    assert!(skipped.iter().all(|k| k.0 == "4"));
    assert!(!cells.contains('\r'));

    let summary = body(&out_a.join("summary.csv"));
    assert_eq!(summary.lines().count(), 1 + 4 * 3 + 2);
    let trace = body(&out_a.join("traces/trace_n1_M2_seed0.csv"));
    assert!(trace.starts_with("t,forgetting,forgetting_unique,rel_step,dist_to_gen,diverged\n"));
    assert_eq!(trace.lines().last().unwrap().split(',').next(), Some("40"));
}

#[test]
fn bad_config_names_field_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("o"), "inner_iterations = 0");
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inner_iterations"));

    let out = bin().args(["preset", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selfcheck_passes() {
    let out = bin().arg("selfcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("network_bitwise"));
}
