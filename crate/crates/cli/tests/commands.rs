//! Drives the built binary end to end on small synthetic data.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sparsematch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsematch"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SPARSEMATCH_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = sparsematch(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Noiseless data plus weights overfit to it.
fn overfit(dir: &Path, count: &str) {
    ok(
        &[
            "--seed", "9", "gen-data", "--out", "data", "--count", count, "--noise", "0",
        ],
        dir,
    );
    ok(
        &[
            "--seed",
            "1",
            "train",
            "--data",
            "data",
            "--out",
            "w.bin",
            "--iterations",
            "200",
        ],
        dir,
    );
}

fn match_pairs(v: &Value) -> HashSet<(u64, u64)> {
    v["matches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| (m["index_a"].as_u64().unwrap(), m["index_b"].as_u64().unwrap()))
        .collect()
}

fn label_pairs(v: &Value) -> HashSet<(u64, u64)> {
    v["matches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| (m[0].as_u64().unwrap(), m[1].as_u64().unwrap()))
        .collect()
}

#[test]
fn noiseless_pair_is_matched_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    overfit(d, "1");
    ok(
        &[
            "match",
            "data/pair_00000_a.json",
            "data/pair_00000_b.json",
            "--weights",
            "w.bin",
            "--out",
            "m.json",
        ],
        d,
    );
    let found = match_pairs(&read_json(&d.join("m.json")));
    let truth = label_pairs(&read_json(&d.join("data/pair_00000_labels.json")));
    assert_eq!(found, truth);
}

#[test]
fn same_file_twice_matches_itself() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    overfit(d, "1");
    let text = ok(
        &[
            "match",
            "data/pair_00000_a.json",
            "data/pair_00000_a.json",
            "--weights",
            "w.bin",
        ],
        d,
    );
    let found = match_pairs(&serde_json::from_str(&text).unwrap());
    let identity = found.iter().filter(|(a, b)| a == b).count();
    assert!(found.len() >= 64, "{} matches", found.len());
    assert!(
        identity as f64 >= 0.95 * found.len() as f64,
        "{identity} of {}",
        found.len()
    );
}

#[test]
fn eval_agrees_with_scoring_the_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["--seed", "4", "gen-data", "--out", "data", "--count", "10"], d);
    ok(&["train", "--data", "data", "--out", "w.bin", "--iterations", "40"], d);
    let report: Value =
        serde_json::from_str(&ok(&["--json", "eval", "--data", "data", "--weights", "w.bin"], d)).unwrap();
    // means over pairs; pairs without predictions have no precision
    let (mut predicted, mut correct, mut score) = (0usize, 0usize, 0.0);
    let mut precisions = Vec::new();
    for i in 0..10 {
        let a = format!("data/pair_{i:05}_a.json");
        let b = format!("data/pair_{i:05}_b.json");
        let found = match_pairs(&serde_json::from_str(&ok(&["match", &a, &b, "--weights", "w.bin"], d)).unwrap());
        let truth = label_pairs(&read_json(&d.join(format!("data/pair_{i:05}_labels.json"))));
        let hits = found.intersection(&truth).count();
        let kps = |p: &str| read_json(&d.join(p))["keypoints"].as_array().unwrap().len() as f64;
        if !found.is_empty() {
            precisions.push(hits as f64 / found.len() as f64);
        }
        predicted += found.len();
        correct += hits;
        score += hits as f64 / ((kps(&a) + kps(&b)) / 2.0);
    }
    assert_eq!(report["predicted_matches"].as_u64().unwrap() as usize, predicted);
    assert_eq!(report["correct_matches"].as_u64().unwrap() as usize, correct);
    let precision = report["precision"].as_f64().unwrap();
    let mean_precision = precisions.iter().sum::<f64>() / precisions.len() as f64;
    assert!((precision - mean_precision).abs() < 1e-12);
    assert!((report["matching_score"].as_f64().unwrap() - score / 10.0).abs() < 1e-12);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |tag: &str| {
        ok(
            &[
                "--seed",
                "2",
                "gen-data",
                "--out",
                &format!("data{tag}"),
                "--count",
                "3",
            ],
            d,
        );
        ok(
            &[
                "--seed",
                "2",
                "train",
                "--data",
                &format!("data{tag}"),
                "--out",
                &format!("w{tag}.bin"),
                "--iterations",
                "20",
            ],
            d,
        );
        ok(
            &[
                "match",
                &format!("data{tag}/pair_00001_a.json"),
                &format!("data{tag}/pair_00001_b.json"),
                "--weights",
                &format!("w{tag}.bin"),
            ],
            d,
        )
    };
    let (m1, m2) = (run("1"), run("2"));
    assert_eq!(m1, m2);
    assert_eq!(
        std::fs::read(d.join("w1.bin")).unwrap(),
        std::fs::read(d.join("w2.bin")).unwrap()
    );
    for f in ["manifest.json", "pair_00002_labels.json", "pair_00000_b.json"] {
        assert_eq!(
            std::fs::read(d.join("data1").join(f)).unwrap(),
            std::fs::read(d.join("data2").join(f)).unwrap()
        );
    }
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "data", "--count", "1"], d);
    ok(&["train", "--data", "data", "--out", "w.bin", "--iterations", "2"], d);
    let (a, b) = ("data/pair_00000_a.json", "data/pair_00000_b.json");

    // truncated weights
    let bytes = std::fs::read(d.join("w.bin")).unwrap();
    std::fs::write(d.join("short.bin"), &bytes[..bytes.len() / 2]).unwrap();
    let out = sparsematch(&["match", a, b, "--weights", "short.bin", "--out", "m.json"], d);
    assert_eq!(out.status.code(), Some(4));
    assert!(!d.join("m.json").exists());
    assert!(!d.join("m.partial").exists());

    // malformed keypoint file reports a position
    std::fs::write(d.join("bad.json"), "{\n  \"version\": 1,\n  \"width\": oops\n}").unwrap();
    let out = sparsematch(&["match", "bad.json", b, "--weights", "w.bin", "--out", "m.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert!(!d.join("m.json").exists());

    // descriptors of the wrong length
    ok(&["gen-data", "--out", "narrow", "--count", "1", "--dim", "16"], d);
    let out = sparsematch(
        &[
            "match",
            "narrow/pair_00000_a.json",
            b,
            "--weights",
            "w.bin",
            "--out",
            "m.json",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("m.json").exists());

    // eval without a labels sidecar
    std::fs::remove_file(d.join("data/pair_00000_labels.json")).unwrap();
    let out = sparsematch(&["eval", "--data", "data", "--weights", "w.bin"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_environment_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.toml"),
        "[scene]\nnum_shared_points = 20\nnum_unmatched_per_image = 5\n",
    )
    .unwrap();
    ok(&["--config", "cfg.toml", "gen-data", "--out", "a", "--count", "1"], d);
    let kps = read_json(&d.join("a/pair_00000_a.json"))["keypoints"]
        .as_array()
        .unwrap()
        .len();
    assert_eq!(kps, 25);

    let out = Command::new(env!("CARGO_BIN_EXE_sparsematch"))
        .args(["gen-data", "--out", "b", "--count", "1"])
        .current_dir(d)
        .env("SPARSEMATCH_CONFIG", "cfg.toml")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        read_json(&d.join("b/pair_00000_b.json"))["keypoints"]
            .as_array()
            .unwrap()
            .len(),
        25
    );

    std::fs::write(d.join("bad.toml"), "[train]\nno_such_key = 1\n").unwrap();
    let out = sparsematch(&["--config", "bad.toml", "train", "--data", "a", "--out", "w.bin"], d);
    assert!(!out.status.success());
}

#[test]
fn bench_writes_csv_and_gnuplot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "--k",
            "8",
            "bench",
            "--n",
            "32,64",
            "--dim",
            "8",
            "--heads",
            "2",
            "--variants",
            "dense-ica,sparse-mkaca",
            "--csv",
            "b.csv",
            "--gnuplot",
            "b.dat",
        ],
        d,
    );
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "n,k,variant,wall_ms,score_evals,peak_bytes");
    assert_eq!(rows.len(), 5);
    let evals: HashMap<(String, String), u64> = rows[1..]
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            ((f[0].to_string(), f[2].to_string()), f[4].parse().unwrap())
        })
        .collect();
    assert_eq!(evals[&("64".to_string(), "dense-ica".to_string())], 4 * 64 * 64);
    // 2·64·8 gathers, 2·8² refinement, 128·16 broadcasts
    assert_eq!(
        evals[&("64".to_string(), "sparse-mkaca".to_string())],
        2 * 64 * 8 + 2 * 64 + 128 * 16
    );
    assert!(std::fs::read_to_string(d.join("b.dat"))
        .unwrap()
        .contains("sparse-mkaca"));
}
