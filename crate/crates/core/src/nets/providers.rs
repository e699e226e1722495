//! Stand-ins for the external pose estimator and landmark detector.

use candle_core::{DType, Module, Tensor};

use super::layers::{soft_argmax, Conv, ParamStore};
use super::NetConfig;
use crate::error::{Error, Result};
use crate::geometry::{identity_grid, Rotation};
use crate::losses::NUM_LANDMARKS;
use crate::pipeline::FrameMeta;

/// Head rotation of a frame.
pub trait PoseProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// `image (3,S,S)`; `meta` when the frame carries ground truth.
    fn rotation(&self, image: &Tensor, meta: Option<&FrameMeta>) -> Result<Rotation>;
}

/// Reads the pose angles recorded with synthetic frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePose;

impl PoseProvider for OraclePose {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn rotation(&self, _image: &Tensor, meta: Option<&FrameMeta>) -> Result<Rotation> {
        let meta = meta.ok_or_else(|| Error::Provider("oracle pose provider needs frame metadata".into()))?;
        Ok(Rotation::from_euler(meta.yaw, meta.pitch, meta.roll))
    }
}

/// Always the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct FixedPose;

impl PoseProvider for FixedPose {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn rotation(&self, _image: &Tensor, _meta: Option<&FrameMeta>) -> Result<Rotation> {
        Ok(Rotation::IDENTITY)
    }
}

/// 145 ordered 2D landmarks per image.
pub trait LandmarkProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// `images (B,3,S,S)` → `(B,145,2)`. `meta` has one entry per image.
    fn detect(&self, images: &Tensor, meta: &[Option<&FrameMeta>]) -> Result<Tensor>;
}

/// Reads ground-truth landmarks from metadata. Not differentiable.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleLandmarks;

impl LandmarkProvider for OracleLandmarks {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn detect(&self, images: &Tensor, meta: &[Option<&FrameMeta>]) -> Result<Tensor> {
        let b = images.dim(0)?;
        if meta.len() != b {
            return Err(Error::Shape(format!("{} metadata entries for {b} images", meta.len())));
        }
        let mut data: Vec<f64> = Vec::with_capacity(b * NUM_LANDMARKS * 2);
        for m in meta {
            let m = m.ok_or_else(|| Error::Provider("oracle landmark provider needs frame metadata".into()))?;
            if m.landmarks.len() != NUM_LANDMARKS {
                return Err(Error::Provider(format!("metadata has {} landmarks", m.landmarks.len())));
            }
            data.extend(m.landmarks.iter().flatten().copied());
        }
        Ok(Tensor::from_vec(data, (b, NUM_LANDMARKS, 2), images.device())?.to_dtype(images.dtype())?)
    }
}

/// Frozen random-weight convolutional detector whose soft-argmax outputs
/// respond smoothly to image content. Used where no metadata exists, such as
/// generated frames.
pub struct SurrogateLandmarks {
    convs: [Conv; 2],
    head: Conv,
    coords: Tensor,
}

const SURROGATE_TEMPERATURE: f64 = 0.05;

impl SurrogateLandmarks {
    pub fn new(config: &NetConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::frozen(seed, dtype);
        let mut s = store.scope("landmarks");
        let n = config.image_size / 4;
        let coords = identity_grid(n, n, dtype, &candle_core::Device::Cpu)?.reshape((n * n, 2))?;
        Ok(Self {
            convs: [s.conv("conv0", 3, 8, 3, 2)?, s.conv("conv1", 8, 16, 3, 2)?],
            head: s.conv("head", 16, NUM_LANDMARKS, 1, 1)?,
            coords,
        })
    }

    /// Differentiable in the images.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        let logits = self.head.forward(&x)?;
        let (b, l, h, w) = logits.dims4()?;
        let logits = (logits.reshape((b, l, h * w))? / SURROGATE_TEMPERATURE)?;
        Ok(soft_argmax(&logits, &self.coords.to_dtype(images.dtype())?)?)
    }
}

impl LandmarkProvider for SurrogateLandmarks {
    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn detect(&self, images: &Tensor, _meta: &[Option<&FrameMeta>]) -> Result<Tensor> {
        self.forward(images)
    }
}

/// Builds a provider by config name.
pub fn pose_provider(name: &str) -> Result<Box<dyn PoseProvider>> {
    match name {
        "oracle" => Ok(Box::new(OraclePose)),
        "fixed" => Ok(Box::new(FixedPose)),
        other => Err(Error::Config(format!("unknown pose provider {other:?}"))),
    }
}
