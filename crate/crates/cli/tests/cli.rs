use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cyclereg::eval::EvalSummary;
use cyclereg::io::load_volume;
use cyclereg::synth::Manifest;

fn cyclereg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclereg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "data.shape=16",
    "--set",
    "data.n_train=3",
    "--set",
    "data.n_test=2",
    "--set",
    "data.warp_magnitude=2.5",
];

fn synth(out: &Path) {
    let mut args = vec!["synth", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    let o = cyclereg(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_writes_dataset_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let (m, _) = Manifest::load(&data).unwrap();
    assert_eq!(m.grid_shape, [16, 16, 16]);
    assert_eq!(m.entries.len(), 5);
    let snap = fs::read_to_string(data.join("resolved_config.toml")).unwrap();
    let parsed: toml::Table = snap.parse().unwrap();
    assert_eq!(parsed["data"]["shape"].as_integer(), Some(16));
    assert_eq!(parsed["data"]["n_train"].as_integer(), Some(3));

    // Same config, same bytes.
    let again = dir.path().join("again");
    synth(&again);
    for f in ["manifest.json", "resolved_config.toml", "subjects/s000_A.nii.gz"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    // An existing dataset is a configuration conflict.
    let mut args = vec!["synth", "--out", data.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(code(&cyclereg(&args)), 2);
}

#[test]
fn missing_parent_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = missing.join("data");
    let mut args = vec!["synth", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    let o = cyclereg(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cyclereg(&[])), 2);
    assert_eq!(code(&cyclereg(&["frobnicate"])), 2);
    assert_eq!(code(&cyclereg(&["synth", "--set", "data.bogus=1"])), 2);
    assert_eq!(code(&cyclereg(&["train", "--set", "train.lr"])), 2);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nregime = \"m2m\"\nwarmup = 3\n").unwrap();
    let o = cyclereg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("warmup"), "{}", stderr(&o));

    // Values that parse but fail validation.
    assert_eq!(code(&cyclereg(&["synth", "--set", "data.n_train=1"])), 2);
    assert_eq!(code(&cyclereg(&["train", "--set", "train.bridge_aligned_ratio=0.5"])), 2);
    assert_eq!(code(&cyclereg(&["--help"])), 0);
}

#[test]
fn identity_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let run = dir.path().join("run");
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\nshape = 16\n\n[train]\nmanifest = {:?}\niterations = 0\n",
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = cyclereg(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("checkpoint.ckpt");
    assert!(ckpt.is_file());
    assert!(run.join("resolved_config.toml").is_file());

    // A fresh model predicts the identity, so the warped volume is the input.
    let src = data.join("subjects/s000_A.nii.gz");
    let tgt = data.join("subjects/s001_B.nii.gz");
    let reg = dir.path().join("reg");
    let o = cyclereg(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--out",
        reg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_volume(reg.join("warped.nii.gz")).unwrap().data, load_volume(&src).unwrap().data);
    let field = cyclereg::transform::load_field(reg.join("field.nii.gz")).unwrap();
    assert!(field.is_zero());

    // Evaluating it reproduces the cached identity metrics.
    let o = cyclereg(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: EvalSummary =
        serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let (m, _) = Manifest::load(&data).unwrap();
    assert_eq!(summary.dsc, m.initial_metrics.dsc);
    assert_eq!(summary.negjac, 0.0);

    let o = cyclereg(&["diag", "--metrics", run.join("metrics.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("diag.csv").is_file() && run.join("diag.json").is_file());

    // Grids must agree.
    let o = cyclereg(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--source",
        src.to_str().unwrap(),
        "--target",
        ckpt.to_str().unwrap(),
        "--out",
        reg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}
