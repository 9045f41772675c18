use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sparselab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparselab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "model": { "kind": "mlp", "input_dim": 6, "hidden": [12], "classes": 3 },
        "strategy": { "kind": "iterative_pruning" },
        "sparsity": 0.8,
        "epochs": 2,
        "update_interval": 3,
        "learning_rate": 0.01,
        "batch_size": 8,
        "seed": 11,
        "data": { "kind": "synthetic", "seed": 2, "n": 64, "dim": 6, "classes": 3, "margin": 2.0, "test_n": 24 },
        "output_dir": dir.join("default-out"),
        "window": 4
    });
    let path = dir.join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = sparselab(&[]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sparselab(&["energy-check", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn energy_check_seed_7_passes() {
    let out = sparselab(&["energy-check", "--seed", "7"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("max rel err"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn train_twice_gives_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = sparselab(&["train", "--config", config, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = csv_files(&dir.path().join("a"));
    assert!(a.iter().any(|(name, _)| name == "grad_window.csv"));
    assert_eq!(a, csv_files(&dir.path().join("b")));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("o");
    let out = sparselab(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--sparsity",
        "0.5",
        "--epochs",
        "1",
        "--strategy",
        "random",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["config"]["sparsity"], 0.5);
    assert_eq!(v["config"]["epochs"], 1);
    assert_eq!(v["config"]["strategy"]["kind"], "random_subnetwork");
}

#[test]
fn failures_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cases: [&[&str]; 3] = [
        &["train", "--config", "/nonexistent/c.json"],
        &["train", "--config", config.to_str().unwrap(), "--strategy", "optimal"],
        &["train", "--config", config.to_str().unwrap(), "--merge", "0.3"],
    ];
    for args in cases {
        let out = sparselab(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with("error: "));
    }
}

#[test]
fn optimal_strategy_reuses_iterative_mask() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let it = dir.path().join("it");
    assert!(sparselab(&["train", "--config", config, "--out", it.to_str().unwrap()])
        .status
        .success());
    let mask = it.join("final_mask.bin");
    let opt = dir.path().join("opt");
    let out = sparselab(&[
        "train",
        "--config",
        config,
        "--out",
        opt.to_str().unwrap(),
        "--strategy",
        "optimal",
        "--mask",
        mask.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(opt.join("grad_window.csv").is_file());
}

#[test]
fn merge_demo_reports_shrink() {
    let out = sparselab(&["merge-demo", "--seed", "1", "--merge", "0.5", "--tokens", "16"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tokens       17 -> 9"), "{stdout}");
    assert!(stdout.contains("total size   17 -> 17"), "{stdout}");
}

#[test]
fn plot_renders_svg_from_series() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "step,value\n100,0.5\n200,0.25\n").unwrap();
    fs::write(&b, "step,value\n100,0.7\n200,0.6\n").unwrap();
    let svg = dir.path().join("plots/out.svg");
    let out = sparselab(&[
        "plot",
        &format!("iterative={}", a.display()),
        &format!("random={}", b.display()),
        "--title",
        "gradients",
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);

    fs::write(&b, "step,value\n100,0.7\noops\n").unwrap();
    let out = sparselab(&["plot", b.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let out = sparselab(&["train", "--config", path.to_str().unwrap(), "--out", "/nonexistent"]);
        // Parsing succeeds; the run stops at the missing dataset directory.
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("dataset directory not found"), "{}: {stderr}", path.display());
    }
}
