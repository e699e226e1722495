//! Input builders shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use facemotion::geometry::{identity_grid, KeypointSet, MotionParams, Rotation};
use facemotion::pipeline::{synthetic_dataset, Dataset, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(batch: usize, channels: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..batch * channels * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (batch, channels, size, size), &Device::Cpu).unwrap()
}

/// Identity grid plus a small random displacement, `(B,S,S,2)`.
pub fn jittered_flow(batch: usize, size: usize, seed: u64) -> Tensor {
    let grid = identity_grid(size, size, DType::F32, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..batch * size * size * 2).map(|_| rng.random_range(-0.05..0.05)).collect();
    let noise = Tensor::from_vec(noise, (batch, size, size, 2), &Device::Cpu).unwrap();
    noise.broadcast_add(&grid).unwrap()
}

pub fn random_keypoints(k: usize, seed: u64) -> (KeypointSet, MotionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let canonical = KeypointSet::new((0..k).map(|_| p()).collect()).unwrap();
    let deformation = (0..k).map(|_| p().map(|v| v * 0.1)).collect();
    let motion = MotionParams {
        rotation: Rotation::from_euler(0.3, -0.2, 0.1),
        translation: [0.05, -0.02],
        scale: 1.1,
        deformation,
    };
    (canonical, motion)
}

pub fn small_dataset(size: usize) -> Dataset {
    synthetic_dataset(&SyntheticConfig { sequences: 2, frames_per_sequence: 4, ..Default::default() }, size).unwrap()
}
