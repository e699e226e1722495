mod common;

use std::process::Command;

use facemotion::pipeline::{decode_image, ingest_folder};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_facemotion"));
    cmd.env_remove("FACEMOTION_CHECKPOINT").env_remove("FACEMOTION_VAE").env("RUST_LOG", "warn");
    cmd
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(bin().arg("frobnicate")), 1);
    assert_eq!(code(&mut bin()), 1);
    assert_eq!(code(bin().args(["edit", "--out", "x.png"])), 1);
    assert_eq!(code(bin().args(["edit", "--source", "a.png", "--out", "x.png", "--yaw", "abc"])), 1);
    assert_eq!(code(bin().args(["animate", "--source", "a", "--driving", "b", "--out", "c", "--mode", "sideways"])), 1);
    // no checkpoint anywhere
    assert_eq!(code(bin().args(["canonical", "--source", "a.png", "--out", "x.png"])), 1);
    assert_eq!(code(bin().arg("--help")), 0);
}

#[test]
fn runtime_errors_exit_2() {
    let fx = common::fixture();
    let out = fx.path("x.png");
    let missing = fx.path("nope.ckpt");
    let mut cmd = bin();
    cmd.args(["--checkpoint", missing.to_str().unwrap(), "canonical", "--source", fx.source.to_str().unwrap()]);
    cmd.args(["--out", out.to_str().unwrap()]);
    assert_eq!(code(&mut cmd), 2);

    let mut cmd = bin();
    cmd.args(["--checkpoint", fx.checkpoint.to_str().unwrap(), "interpolate"]);
    cmd.args(["--source", fx.source.to_str().unwrap(), "--driving", fx.driving.to_str().unwrap()]);
    cmd.args(["--alpha", "0.5", "--out", out.to_str().unwrap()]);
    let output = cmd.output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("VAE"));
}

#[test]
fn edit_via_env_checkpoint_writes_image_and_keypoints() {
    let fx = common::fixture();
    let out = fx.path("edit.png");
    let output = bin()
        .env("FACEMOTION_CHECKPOINT", &fx.checkpoint)
        .args(["edit", "--source", fx.source.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["--yaw", "-0.3", "--translation", "0.1,-0.1", "--scale", "1.1"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let v: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["keypoints"].as_array().unwrap().len(), fx.config.net.num_keypoints);
    let img = decode_image(&std::fs::read(&out).unwrap(), 64).unwrap();
    assert_eq!(img.dims(), [3, 64, 64]);
}

#[test]
fn animate_is_deterministic_and_interpolate_uses_vae() {
    let fx = common::fixture();
    let run = |name: &str| {
        let out = fx.path(name);
        let mut cmd = bin();
        cmd.args(["--checkpoint", fx.checkpoint.to_str().unwrap(), "animate"]);
        cmd.args(["--source", fx.source.to_str().unwrap(), "--driving", fx.driving.to_str().unwrap()]);
        cmd.args(["--driving-pose", "0.2,0,0", "--pose", "relative", "--reference", fx.source.to_str().unwrap()]);
        cmd.args(["--out", out.to_str().unwrap()]);
        assert_eq!(code(&mut cmd), 0);
        fx.png(name)
    };
    assert_eq!(run("a.png"), run("b.png"));

    let out = fx.path("interp.png");
    let mut cmd = bin();
    cmd.args(["--checkpoint", fx.with_vae.to_str().unwrap(), "interpolate"]);
    cmd.args(["--source", fx.source.to_str().unwrap(), "--driving", fx.driving.to_str().unwrap()]);
    cmd.args(["--alpha", "0.25", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&mut cmd), 0);
    assert!(out.exists());
}

#[test]
fn synth_then_train_eval_and_fit_vae() {
    let fx = common::fixture();
    let data = fx.path("data");
    let mut cmd = bin();
    cmd.args(["synth", "--out", data.to_str().unwrap(), "--sequences", "2", "--frames", "3"]);
    assert_eq!(code(&mut cmd), 0);
    let ds = ingest_folder(&data, 64).unwrap();
    assert_eq!((ds.sequences.len(), ds.num_frames()), (2, 6));

    let config = fx.path("run.toml");
    let mut cfg = fx.config.clone();
    cfg.batch_size = 1;
    cfg.vae.batch_size = 4;
    cfg.data = facemotion::pipeline::DataSource::Folder { path: data.clone() };
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();

    let ckpt = fx.path("trained.ckpt");
    let metrics = fx.path("metrics.jsonl");
    let mut cmd = bin();
    cmd.args(["train", "--config", config.to_str().unwrap(), "--steps", "2"]);
    cmd.args(["--out", ckpt.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()]);
    assert_eq!(code(&mut cmd), 0);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 2);

    // resume one more step
    let mut cmd = bin();
    cmd.args(["train", "--resume", ckpt.to_str().unwrap(), "--steps", "3", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&mut cmd), 0);
    let info = facemotion::animator::Animator::load(&ckpt, None).unwrap().info();
    assert_eq!(info.step, 3);

    let with_vae = fx.path("trained_vae.ckpt");
    let mut cmd = bin();
    cmd.args(["--checkpoint", ckpt.to_str().unwrap(), "train-vae", "--steps", "3"]);
    cmd.args(["--out", with_vae.to_str().unwrap()]);
    assert_eq!(code(&mut cmd), 0);
    assert!(facemotion::animator::Animator::load(&with_vae, None).unwrap().has_vae());

    let jsonl = fx.path("eval.jsonl");
    let output = bin()
        .args(["--checkpoint", ckpt.to_str().unwrap(), "eval", "--jsonl", jsonl.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let table = String::from_utf8_lossy(&output.stdout);
    assert!(table.contains("PSNR") && table.contains("FID"));
    assert!(std::fs::read_to_string(&jsonl).unwrap().lines().count() > 1);
}
