mod common;

use std::process::Command;

use common::{bin, tiny_checkpoint, write_config};

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().unwrap()
}

#[test]
fn train_twice_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--output", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/metrics.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), lvgan_core::trainer::METRICS_HEADER);
    assert_eq!(text.lines().count(), 25);
    let cfg_json = std::fs::read_to_string(dir.path().join("a/config.json")).unwrap();
    assert!(cfg_json.contains("\"seed\": 7"));
}

#[test]
fn set_override_tags_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("abl");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "gamma_s=0", "--output", out.to_str().unwrap()]);
    assert!(o.status.success());
    let state = lvgan_core::trainer::read_state(&out.join("checkpoint.lfck")).unwrap();
    assert_eq!(state.config.tag, "-Ls");
    assert_eq!(state.config.weights.gamma_s, 0.0);
}

#[test]
fn bad_configs_exit_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let missing = write_config(dir.path(), "dataset.path = /nonexistent/images\n");
    let o = run(&["train", "--config", missing.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let unknown = write_config(dir.path(), "model.depth = 3\n");
    let o = run(&["train", "--config", unknown.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert!(!out.exists());
}

#[test]
fn eval_counts_pairs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let ck = ck.to_str().unwrap();
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    let e3 = dir.path().join("e3");
    assert!(run(&["eval", "--checkpoint", ck, "--samples", "32", "--out", e1.to_str().unwrap()]).status.success());
    assert!(run(&["eval", "--checkpoint", ck, "--samples", "32", "--out", e2.to_str().unwrap()]).status.success());
    let o = run(&["eval", "--checkpoint", ck, "--samples", "32", "--perturbations", "3", "--factors", "--out", e3.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(e1.join("perturbations.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(e2.join("perturbations.csv")).unwrap());
    let s1: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(e1.join("summary.json")).unwrap()).unwrap();
    let s3: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(e3.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s1["pairs"], 4 * 10);
    assert_eq!(s3["pairs"], 4 * 3);
    assert!(s1["frechet_proxy"].as_f64().unwrap().is_finite());
    assert!(e3.join("factors.csv").exists());
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.lfck");
    std::fs::write(&bad, b"LFCK\x01\x00garbage").unwrap();
    for cmd in ["eval", "sample"] {
        let o = run(&[cmd, "--checkpoint", bad.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
    }
}

#[test]
fn sample_modes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let ck = ck.to_str().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let codes = |n: &str| -> Vec<Vec<f64>> {
        std::fs::read_to_string(dir.path().join(n))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };

    for name in ["r1.ppm", "r2.ppm"] {
        assert!(run(&["sample", "--checkpoint", ck, "--seed", "4", "--n", "6", "--out", &p(name)]).status.success());
    }
    assert_eq!(std::fs::read(p("r1.ppm")).unwrap(), std::fs::read(p("r2.ppm")).unwrap());
    assert_eq!(codes("r1.codes.csv").len(), 6);

    assert!(run(&["sample", "--checkpoint", ck, "--mode", "interp", "--n", "2", "--out", &p("i2.ppm")]).status.success());
    assert!(run(&["sample", "--checkpoint", ck, "--mode", "interp", "--n", "5", "--out", &p("i5.ppm")]).status.success());
    let (i2, i5) = (codes("i2.codes.csv"), codes("i5.codes.csv"));
    assert_eq!(i2.len(), 2);
    assert_eq!((i5[0].clone(), i5[4].clone()), (i2[0].clone(), i2[1].clone()));

    let o = run(&["sample", "--checkpoint", ck, "--mode", "element-sweep", "--element", "2", "--n", "7", "--out", &p("s.ppm")]);
    assert!(o.status.success());
    let s = codes("s.codes.csv");
    assert_eq!(s.len(), 7);
    for row in &s {
        for j in [0, 1, 3] {
            assert_eq!(row[j], s[0][j]);
        }
    }
    assert_eq!((s[0][2], s[6][2]), (-1.0, 1.0));

    let o = run(&["sample", "--checkpoint", ck, "--mode", "zigzag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_continues_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let full = dir.path().join("full");
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--output", full.to_str().unwrap()]).status.success());
    // A shorter run of the same configuration then resumed must end identically.
    let part = dir.path().join("part");
    let short = write_config(dir.path(), "");
    let mut args = lvgan_cli::commands::TrainArgs {
        config: short,
        output: Some(part.clone()),
        ..Default::default()
    };
    let (mut tr, _) = lvgan_cli::commands::prepare_train(&args).unwrap();
    std::fs::create_dir_all(&part).unwrap();
    let paths = lvgan_core::trainer::RunPaths::new(&part);
    let mut log = format!("{}\n", lvgan_core::trainer::METRICS_HEADER);
    for _ in 0..10 {
        log.push_str(&tr.step().unwrap().csv_row());
        log.push('\n');
    }
    // a stale row beyond the checkpoint, as left by an interrupted run
    log.push_str("10,9,9,9,9,9,9,9,9\n");
    std::fs::write(&paths.metrics, log).unwrap();
    tr.save_checkpoint(&paths.checkpoint).unwrap();
    args.resume = true;
    lvgan_cli::commands::cmd_train(&args).unwrap();
    assert_eq!(
        std::fs::read_to_string(full.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(part.join("metrics.csv")).unwrap()
    );
}
