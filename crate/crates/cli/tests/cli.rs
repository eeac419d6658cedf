use std::path::Path;
use std::process::{Command, Output};

fn danp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_danp"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn tiny_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/tiny.toml")
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn solve_beta_prints_the_sawtooth_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = danp(
        dir.path(),
        &["solve-beta", "--levels", "3", "--sigma2", "0.02"],
    );
    assert!(out.status.success());
    let beta: f64 = String::from_utf8(out.stdout)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((beta - 0.08526).abs() < 1e-4, "{beta}");
}

#[test]
fn unreachable_variance_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = danp(
        dir.path(),
        &["solve-beta", "--levels", "3", "--sigma2", "1.5"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(danp(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        danp(dir.path(), &["gen", "--no-such-flag"]).status.code(),
        Some(2)
    );
}

#[test]
fn bad_configs_exit_3_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "generator = \"sawtooth\"\nbogus_key = 1\n",
        "levels = 3\nbeta = 0.08526\nsigma2 = 0.05\n",
        "generator = \"triangle\"\n",
    ];
    for text in cases {
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text).unwrap();
        let out = danp(dir.path(), &["--config", "bad.toml", "gen"]);
        assert_eq!(out.status.code(), Some(3), "{text}");
        assert!(
            String::from_utf8_lossy(&out.stderr).contains("line"),
            "{text}"
        );
    }
}

#[test]
fn damaged_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.ckpt"), b"not a checkpoint").unwrap();
    let out = danp(
        dir.path(),
        &["--config", &tiny_config(), "eval", "--checkpoint", "x.ckpt"],
    );
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn oracle_needs_the_gp_generator() {
    let dir = tempfile::tempdir().unwrap();
    let out = danp(dir.path(), &["eval", "--oracle"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn every_output_directory_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    assert!(danp(dir.path(), &["--config", &cfg, "--out", "g", "gen"])
        .status
        .success());
    let manifest = std::fs::read_to_string(dir.path().join("g/manifest.txt")).unwrap();
    assert!(manifest.starts_with("danp-manifest 1\n"));
    assert!(manifest.contains("seed 0\n"));
    // The embedded config reproduces the run.
    let config_text = manifest.split("[config]\n").nth(1).unwrap();
    std::fs::write(dir.path().join("replay.toml"), config_text).unwrap();
    assert!(danp(
        dir.path(),
        &["--config", "replay.toml", "--out", "h", "gen"]
    )
    .status
    .success());
    assert_eq!(
        std::fs::read(dir.path().join("g/metadataset.txt")).unwrap(),
        std::fs::read(dir.path().join("h/metadataset.txt")).unwrap()
    );
}

#[test]
fn sample_writes_one_file_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let out = danp(
        dir.path(),
        &[
            "--config",
            &cfg,
            "--out",
            ".",
            "sample",
            "--oracle",
            "--samples",
            "3",
            "--task-index",
            "4",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for layer in 0..=2 {
        let text = std::fs::read_to_string(dir.path().join(format!("layer{layer}.txt"))).unwrap();
        let first: Vec<f64> = text
            .lines()
            .next()
            .unwrap()
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(first.len(), 3);
        assert!(first[2] > 0.0);
    }
    let context = std::fs::read_to_string(dir.path().join("context.txt")).unwrap();
    assert_eq!(context.lines().count(), 4);
}

#[test]
fn oracle_check_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let out = danp(
        dir.path(),
        &[
            "--config",
            &cfg,
            "--out",
            ".",
            "oracle-check",
            "--tasks",
            "2",
            "--context-size",
            "3",
            "--large-samples",
            "64",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("oracle_check.txt"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}
