use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn capmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capmoe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// CSV body rows as string fields.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

/// Six tokens, three experts, top-1: expert 0 is wanted by four tokens.
fn running_example(dir: &TempDir) -> PathBuf {
    let scores = [
        [0.9, 0.05, 0.05],
        [0.8, 0.1, 0.1],
        [0.7, 0.2, 0.1],
        [0.6, 0.15, 0.25],
        [0.1, 0.8, 0.1],
        [0.1, 0.1, 0.8],
    ];
    let logits: Vec<Vec<f64>> = scores
        .iter()
        .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
        .collect();
    let record = serde_json::json!({"layer": 0, "t": 6, "n": 3, "k": 1, "logits": logits});
    let path = dir.path().join("example.jsonl");
    fs::write(&path, format!("{record}\n")).unwrap();
    path
}

#[test]
fn generate_scratch_like_reports_heavy_peak() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tr.jsonl");
    let o = capmoe(&[
        "generate",
        "--t",
        "4096",
        "--n",
        "64",
        "--k",
        "8",
        "--preset",
        "scratch-like",
        "--seed",
        "1",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.exists());
    let text = stdout(&o);
    assert!(text.contains("t=4096 n=64 k=8"), "{text}");
    let peak: f64 = text
        .trim()
        .rsplit_once("max_normalized_load=")
        .unwrap()
        .1
        .parse()
        .unwrap();
    assert!(peak >= 5.0, "{peak}");
}

#[test]
fn generate_without_out_is_a_usage_error() {
    let o = capmoe(&["generate", "--t", "10", "--n", "4", "--k", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn generate_rejects_k_above_n() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tr.jsonl");
    let o = capmoe(&[
        "generate",
        "--t",
        "10",
        "--n",
        "8",
        "--k",
        "9",
        "--out",
        path_str(&out),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("k exceeds n"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn analyze_gamma_list_gives_nonincreasing_drop() {
    let dir = TempDir::new().unwrap();
    let tr = dir.path().join("tr.jsonl");
    let gen = capmoe(&[
        "generate",
        "--t",
        "2048",
        "--n",
        "32",
        "--k",
        "4",
        "--skew",
        "0.3",
        "--seed",
        "5",
        "--out",
        path_str(&tr),
    ]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let out = dir.path().join("a.csv");
    let o = capmoe(&[
        "analyze",
        "--trace",
        path_str(&tr),
        "--gammas",
        "3.0,2.0,1.5,1.0",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    let gammas: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(gammas, ["3", "2", "1.5", "1"]);
    let dt: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(dt.windows(2).all(|w| w[0] <= w[1]), "{dt:?}");
}

#[test]
fn analyze_uniform_example_in_json() {
    let dir = TempDir::new().unwrap();
    let tr = running_example(&dir);
    let out = dir.path().join("a.json");
    let o = capmoe(&[
        "analyze",
        "--trace",
        path_str(&tr),
        "--gammas",
        "1,inf",
        "--out",
        path_str(&out),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let dropped = &v[0]["dropped"];
    assert_eq!(dropped[0]["gamma"], 1.0);
    assert_eq!(dropped[0]["dropped_fraction"], 2.0 / 6.0);
    assert_eq!(dropped[1]["gamma"], "inf");
    assert_eq!(dropped[1]["dropped_fraction"], 0.0);
}

#[test]
fn missing_trace_names_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such_trace.jsonl");
    let out = dir.path().join("a.csv");
    let o = capmoe(&[
        "analyze",
        "--trace",
        path_str(&missing),
        "--out",
        path_str(&out),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_trace.jsonl"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn trace_and_synthetic_flags_are_exclusive() {
    let dir = TempDir::new().unwrap();
    let tr = running_example(&dir);
    let out = dir.path().join("a.csv");
    let o = capmoe(&[
        "analyze",
        "--trace",
        path_str(&tr),
        "--t",
        "10",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = capmoe(&["analyze", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_straggler_trace_predicts_seven_over_one_and_a_half() {
    let dir = TempDir::new().unwrap();
    let tr = dir.path().join("p.jsonl");
    let gen = capmoe(&[
        "generate",
        "--t",
        "800",
        "--n",
        "8",
        "--k",
        "1",
        "--peak",
        "7",
        "--seed",
        "2",
        "--out",
        path_str(&tr),
    ]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let out = dir.path().join("s.csv");
    let o = capmoe(&[
        "simulate",
        "--trace",
        path_str(&tr),
        "--gamma",
        "1.5",
        "--metric",
        "score",
        "--devices",
        "8",
        "--experts-per-device",
        "1",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 1);
    let speedup: f64 = rows[0][5].parse().unwrap();
    assert!((speedup - 7.0 / 1.5).abs() < 1e-9, "{speedup}");
    assert!(stdout(&o).contains("best layer speedup"), "{}", stdout(&o));
    assert!(stdout(&o).contains("at gamma 1.5"));
}

#[test]
fn simulate_unbounded_gamma_is_the_baseline() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.csv");
    let o = capmoe(&[
        "simulate",
        "--t",
        "512",
        "--n",
        "16",
        "--k",
        "2",
        "--skew",
        "0.5",
        "--gamma",
        "inf",
        "--reroute-rounds",
        "2",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for r in csv_rows(&out) {
        assert_eq!(r[1], "inf");
        assert_eq!(r[5], "1");
        assert_eq!(r[6], "1");
        assert_eq!(r[3], "0");
    }
}

#[test]
fn reroute_rounds_change_retained_fraction() {
    let dir = TempDir::new().unwrap();
    let tr = running_example(&dir);
    let retained = |rounds: &str| -> f64 {
        let out = dir.path().join(format!("r{rounds}.csv"));
        let o = capmoe(&[
            "simulate",
            "--trace",
            path_str(&tr),
            "--gamma",
            "1",
            "--no-drop",
            "--reroute-rounds",
            rounds,
            "--out",
            path_str(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let rows = csv_rows(&out);
        assert_eq!(rows[0][0], format!("reroute:{rounds}"));
        rows[0][7].parse().unwrap()
    };
    assert_eq!(retained("2"), 1.0);
    assert_eq!(retained("1"), 4.0 / 6.0);
}

#[test]
fn too_few_device_slots_is_an_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.csv");
    let o = capmoe(&[
        "simulate",
        "--t",
        "64",
        "--n",
        "16",
        "--k",
        "2",
        "--devices",
        "2",
        "--experts-per-device",
        "4",
        "--out",
        path_str(&out),
    ]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn identical_flags_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, format: &str| -> (Vec<u8>, String) {
        let out = dir.path().join(name);
        let o = capmoe(&[
            "simulate",
            "--t",
            "1024",
            "--n",
            "16",
            "--k",
            "2",
            "--preset",
            "scratch-like",
            "--seed",
            "9",
            "--metric",
            "random",
            "--reroute-rounds",
            "3",
            "--expert-drop",
            "0.25",
            "--devices",
            "4",
            "--out",
            path_str(&out),
            "--format",
            format,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(&out).unwrap(), stdout(&o))
    };
    for format in ["csv", "json"] {
        assert_eq!(run("a", format), run("b", format));
    }

    let gen = |name: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let o = capmoe(&[
            "generate",
            "--t",
            "300",
            "--n",
            "12",
            "--k",
            "3",
            "--skew",
            "1.1",
            "--seed",
            "4",
            "--out",
            path_str(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(&out).unwrap()
    };
    assert_eq!(gen("g1.jsonl"), gen("g2.jsonl"));
}
