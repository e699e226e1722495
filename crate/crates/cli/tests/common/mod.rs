#![allow(dead_code)]

use std::path::{Path, PathBuf};

use facemotion::pipeline::{encode_png, synthetic_frame, Checkpoint, ExpressionState, RunConfig, TrainState, VaeState};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub checkpoint: PathBuf,
    pub with_vae: PathBuf,
    pub source: PathBuf,
    pub driving: PathBuf,
    pub config: RunConfig,
}

impl Fixture {
    pub fn png(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.dir.path().join(name)).unwrap()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn write_frame(path: &Path, seed: u64, yaw: f64, expression: ExpressionState) {
    let f = synthetic_frame(seed, 64, yaw, 0.0, 0.0, expression).unwrap();
    std::fs::write(path, encode_png(&f.image).unwrap()).unwrap();
}

/// Randomly initialized checkpoints, with and without a VAE, plus two frames.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::toy();
    let state = TrainState::new(&config).unwrap();
    let checkpoint = dir.path().join("model.ckpt");
    Checkpoint::from_state(&state, None).save(&checkpoint).unwrap();
    let o = &config.optim;
    let vae = VaeState::new(&config.vae, 3, o.beta1, o.beta2, o.eps).unwrap();
    let with_vae = dir.path().join("model_vae.ckpt");
    Checkpoint::from_state(&state, Some(&vae)).save(&with_vae).unwrap();

    let source = dir.path().join("source.png");
    let driving = dir.path().join("driving.png");
    write_frame(&source, 1, 0.0, ExpressionState::default());
    write_frame(&driving, 1, 0.2, ExpressionState { mouth_open: 0.8, ..Default::default() });
    Fixture { dir, checkpoint, with_vae, source, driving, config }
}
