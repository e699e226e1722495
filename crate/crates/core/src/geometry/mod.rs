//! Keypoint motion algebra.
//!
//! All coordinates live in the normalized `[-1, 1]` image frame: `x` grows to
//! the right, `y` grows downwards (row order) and `z` is depth. Pixel centers
//! of the first and last column map to `-1` and `+1` respectively; see
//! [`to_pixel`] / [`to_normalized`].
//!
//! Every operation comes in two flavors: a typed, validated API on
//! [`KeypointSet`] / [`MotionParams`] and a batched tensor API (`*_tensor`)
//! that stays inside the autodiff graph and is what the networks use.

mod augment;
mod flow;
mod warp;

pub use augment::{apply_augment, invert_augment_points, invert_points_tensor, AugmentTransform};
pub use flow::{
    dense_flow, dense_flow_tensor, identity_grid, sparse_motion, sparse_motion_tensor, FlowField,
};
pub use warp::{warp, warp_to, warp_volume};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-5;

/// Maps a normalized coordinate to a (fractional) pixel index along an axis of `size` pixels.
pub fn to_pixel(coord: f64, size: usize) -> f64 {
    (coord + 1.0) * 0.5 * (size.max(1) - 1) as f64
}

/// Inverse of [`to_pixel`].
pub fn to_normalized(pixel: f64, size: usize) -> f64 {
    if size <= 1 {
        return 0.0;
    }
    pixel * 2.0 / (size - 1) as f64 - 1.0
}

/// A 3×3 rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// `R = R_z(roll) · R_y(yaw) · R_x(pitch)`.
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64) -> Self {
        rotation_from_euler(yaw, pitch, roll)
    }

    /// Recovers `(yaw, pitch, roll)` for the convention of [`Rotation::from_euler`].
    /// Away from gimbal lock (`|yaw| = π/2`) this is the exact inverse.
    pub fn to_euler(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let yaw = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let pitch = m[2][1].atan2(m[2][2]);
        let roll = m[1][0].atan2(m[0][0]);
        (yaw, pitch, roll)
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[j][i];
            }
        }
        Rotation(out)
    }

    /// Matrix product `self · rhs`.
    pub fn compose(&self, rhs: &Rotation) -> Self {
        Rotation(mat3_mul(&self.0, &rhs.0))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest of `‖RᵀR − I‖∞` and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat3_mul(&self.transpose().0, &self.0);
        let mut worst: f64 = (self.determinant() - 1.0).abs();
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }

    pub fn validate(&self) -> Result<()> {
        let deviation = self.orthonormality_error();
        if deviation > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation { deviation });
        }
        Ok(())
    }

    /// Top-left 2×2 block, the in-plane part of the rotation.
    pub fn in_plane(&self) -> [[f64; 2]; 2] {
        let m = &self.0;
        [[m[0][0], m[0][1]], [m[1][0], m[1][1]]]
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Builds `R = R_z(roll) · R_y(yaw) · R_x(pitch)` from angles in radians.
pub fn rotation_from_euler(yaw: f64, pitch: f64, roll: f64) -> Rotation {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    Rotation([
        [cr * cy, cr * sy * sp - sr * cp, cr * sy * cp + sr * sp],
        [sr * cy, sr * sy * sp + cr * cp, sr * sy * cp - cr * sp],
        [-sy, cy * sp, cy * cp],
    ])
}

/// K ordered 3D keypoints in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    points: Vec<[f64; 3]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("keypoint coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Row-major K×3 values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Reads a `(K, 3)` or `(1, K, 3)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 if t.dim(0)? == 1 => t.squeeze(0)?,
            2 => t.clone(),
            _ => return Err(Error::Shape(format!("expected (K, 3) keypoints, got {:?}", t.shape()))),
        };
        if t.dim(1)? != 3 {
            return Err(Error::Shape(format!("expected (K, 3) keypoints, got {:?}", t.shape())));
        }
        let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Self::new(rows.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    /// `(1, K, 3)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.to_flat(), (1, self.len(), 3), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn pairwise_distances(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.len().saturating_sub(1) / 2);
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let (a, b) = (self.points[i], self.points[j]);
                out.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt());
            }
        }
        out
    }
}

/// Decomposed motion: `p = R · f · (p_C + δ) + [t, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub rotation: Rotation,
    pub translation: [f64; 2],
    pub scale: f64,
    pub deformation: Vec<[f64; 3]>,
}

impl MotionParams {
    /// `R = I`, `t = 0`, `f = 1`, `δ = 0`.
    pub fn neutral(num_keypoints: usize) -> Self {
        Self {
            rotation: Rotation::IDENTITY,
            translation: [0.0, 0.0],
            scale: 1.0,
            deformation: vec![[0.0; 3]; num_keypoints],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation.validate()?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.scale)));
        }
        if self.translation.iter().any(|v| !v.is_finite())
            || self.deformation.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("motion parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Composes canonical keypoints with a decomposed motion.
pub fn compose_keypoints(canonical: &KeypointSet, motion: &MotionParams) -> Result<KeypointSet> {
    motion.validate()?;
    if motion.deformation.len() != canonical.len() {
        return Err(Error::Shape(format!(
            "deformation has {} rows for {} keypoints",
            motion.deformation.len(),
            canonical.len()
        )));
    }
    let device = Device::Cpu;
    let k = canonical.len();
    let canonical_t = canonical.to_tensor(DType::F64, &device)?;
    let rotation = Tensor::from_vec(motion.rotation.0.concat(), (1, 3, 3), &device)?;
    let scale = Tensor::from_vec(vec![motion.scale], (1, 1), &device)?;
    let translation = Tensor::from_vec(motion.translation.to_vec(), (1, 2), &device)?;
    let deformation = Tensor::from_vec(motion.deformation.concat(), (1, k, 3), &device)?;
    let out = compose_keypoints_tensor(&canonical_t, &rotation, &scale, &translation, &deformation)?;
    KeypointSet::from_tensor(&out)
}

/// Batched composition. Shapes: canonical `(B,K,3)`, rotation `(B,3,3)`,
/// scale `(B,1)`, translation `(B,2)`, deformation `(B,K,3)` → `(B,K,3)`.
pub fn compose_keypoints_tensor(
    canonical: &Tensor,
    rotation: &Tensor,
    scale: &Tensor,
    translation: &Tensor,
    deformation: &Tensor,
) -> candle_core::Result<Tensor> {
    let b = canonical.dim(0)?;
    let shaped = (canonical + deformation)?.broadcast_mul(&scale.reshape((b, 1, 1))?)?;
    let rotated = shaped.matmul(&rotation.transpose(1, 2)?.contiguous()?)?;
    let depth = Tensor::zeros((b, 1), translation.dtype(), translation.device())?;
    let lifted = Tensor::cat(&[translation, &depth], 1)?.unsqueeze(1)?;
    rotated.broadcast_add(&lifted)
}

/// Drops depth: `(x, y, z) → (x, y)`.
pub fn project_orthographic(kps: &KeypointSet) -> Vec<[f64; 2]> {
    kps.points.iter().map(|p| [p[0], p[1]]).collect()
}

/// `(B,K,3) → (B,K,2)`.
pub fn project_orthographic_tensor(kps: &Tensor) -> candle_core::Result<Tensor> {
    kps.narrow(2, 0, 2)
}

/// Builds a `(B,3,3)` tensor from rotations.
pub fn rotations_tensor(rotations: &[Rotation], dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let data: Vec<f64> = rotations.iter().flat_map(|r| r.0.concat()).collect();
    Tensor::from_vec(data, (rotations.len(), 3, 3), device)?.to_dtype(dtype)
}
