use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::flow::identity_grid;
use super::warp::warp;
use crate::error::{Error, Result};

/// Image-plane similarity transform `p ↦ s · Rot(θ) · p + t` in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentTransform {
    angle: f64,
    scale: f64,
    translation: [f64; 2],
}

impl Default for AugmentTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentTransform {
    pub fn new(angle: f64, scale: f64, translation: [f64; 2]) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::NonInvertible { scale });
        }
        if !angle.is_finite() || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("transform parameters must be finite".into()));
        }
        Ok(Self { angle, scale, translation })
    }

    pub fn identity() -> Self {
        Self { angle: 0.0, scale: 1.0, translation: [0.0, 0.0] }
    }

    pub fn translation_only(tx: f64, ty: f64) -> Self {
        Self { angle: 0.0, scale: 1.0, translation: [tx, ty] }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translation(&self) -> [f64; 2] {
        self.translation
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Linear part `s · Rot(θ)`.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        [[self.scale * c, -self.scale * s], [self.scale * s, self.scale * c]]
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let a = self.linear();
        [
            a[0][0] * p[0] + a[0][1] * p[1] + self.translation[0],
            a[1][0] * p[0] + a[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.angle).sin_cos();
        let inv = 1.0 / self.scale;
        let [tx, ty] = self.translation;
        Self {
            angle: -self.angle,
            scale: inv,
            translation: [-inv * (c * tx - s * ty), -inv * (s * tx + c * ty)],
        }
    }

    pub fn invert_point(&self, p: [f64; 2]) -> [f64; 2] {
        self.inverse().apply_point(p)
    }
}

/// Resamples an image `(C,H,W)` or `(B,C,H,W)` so that content at `p` moves to `T(p)`.
pub fn apply_augment(image: &Tensor, transform: &AugmentTransform) -> Result<Tensor> {
    let (h, w) = (image.dim(image.rank() - 2)?, image.dim(image.rank() - 1)?);
    if transform.is_identity() {
        return Ok(image.clone());
    }
    let flow = backward_grid(transform, h, w, image.dtype(), image.device())?;
    warp(image, &flow)
}

/// Sampling grid `T⁻¹(z)` for every output pixel `z`, shape `(1,H,W,2)`.
fn backward_grid(transform: &AugmentTransform, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let inv = transform.inverse();
    let grid = identity_grid(h, w, DType::F64, device)?;
    let a = inv.linear();
    let lin = Tensor::from_vec(vec![a[0][0], a[1][0], a[0][1], a[1][1]], (2, 2), device)?;
    let shift = Tensor::from_vec(inv.translation.to_vec(), (1, 2), device)?;
    let mapped = grid.reshape((h * w, 2))?.matmul(&lin)?.broadcast_add(&shift)?;
    Ok(mapped.reshape((1, h, w, 2))?.to_dtype(dtype)?)
}

pub fn invert_augment_points(points: &[[f64; 2]], transform: &AugmentTransform) -> Vec<[f64; 2]> {
    let inv = transform.inverse();
    points.iter().map(|p| inv.apply_point(*p)).collect()
}

/// Applies `T_b⁻¹` to each batch row of `points (B,K,2)`, differentiably.
pub fn invert_points_tensor(points: &Tensor, transforms: &[AugmentTransform]) -> Result<Tensor> {
    let (b, _, two) = points.dims3()?;
    if two != 2 || transforms.len() != b {
        return Err(Error::Shape(format!(
            "{} transforms for points {:?}",
            transforms.len(),
            points.shape()
        )));
    }
    let mut lin = Vec::with_capacity(b * 4);
    let mut shift = Vec::with_capacity(b * 2);
    for t in transforms {
        let inv = t.inverse();
        let a = inv.linear();
        // transposed so that rows multiply on the right
        lin.extend([a[0][0], a[1][0], a[0][1], a[1][1]]);
        shift.extend(inv.translation);
    }
    let device = points.device();
    let lin = Tensor::from_vec(lin, (b, 2, 2), device)?.to_dtype(points.dtype())?;
    let shift = Tensor::from_vec(shift, (b, 1, 2), device)?.to_dtype(points.dtype())?;
    Ok(points.matmul(&lin)?.broadcast_add(&shift)?)
}
