//! Learnable blocks of the animation model, with shape contracts checked at
//! their boundaries.
//!
//! Image tensors are `(B, 3, S, S)` in `[-1, 1]`. Keypoints are `(B, K, 3)`.

mod appearance;
mod discriminator;
mod expression;
mod generator;
mod keypoints;
pub mod layers;
mod model;
mod motion;
mod providers;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use appearance::AppearanceEncoder;
pub use discriminator::{DiscriminatorNet, DiscriminatorOutput};
pub use expression::{ExpressionDecoder, ExpressionEncoder};
pub use generator::{Generator, GeneratorOutput};
pub use keypoints::{AffineEstimate, AffineEstimator, KeypointDetector};
pub use layers::ParamStore;
pub use model::{Discriminator, MotionEstimate, Rendered};
pub(crate) use motion::identity_jacobians;
pub use motion::{gaussian_heatmaps, DenseMotionNet, MotionInput, MotionOutput};
pub use providers::{
    pose_provider, FixedPose, LandmarkProvider, OracleLandmarks, OraclePose, PoseProvider, SurrogateLandmarks,
};

use crate::error::{Error, Result};

/// Local Jacobian used by the keypoint affine motions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// In-plane block of `R_S · R_D⁻¹`, shared by all keypoints.
    #[default]
    Rotation,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub num_keypoints: usize,
    pub expr_dim: usize,
    /// Channels `C` of the `C×D×H'×W'` appearance volume.
    pub volume_channels: usize,
    /// Depth `D` of the appearance volume.
    pub volume_depth: usize,
    /// Narrowest convolution width; other widths are multiples of it.
    pub base_width: usize,
    /// Output resolutions of the generator heads, coarse to fine.
    pub generator_scales: Vec<usize>,
    /// Depth bins of the keypoint heatmap volume.
    pub keypoint_depth: usize,
    pub keypoint_temperature: f64,
    /// Std-dev of the keypoint heatmaps fed to the dense motion network.
    pub heatmap_sigma: f64,
    pub use_occlusion: bool,
    pub jacobian: JacobianMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::for_image_size(64)
    }
}

impl NetConfig {
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            num_keypoints: 20,
            expr_dim: 256,
            volume_channels: 32,
            volume_depth: 16,
            base_width: 16 * (image_size / 64).max(1),
            generator_scales: vec![image_size / 4, image_size / 2, image_size],
            keypoint_depth: 8,
            keypoint_temperature: 0.1,
            heatmap_sigma: 0.1,
            use_occlusion: true,
            jacobian: JacobianMode::Rotation,
        }
    }

    /// Spatial size of the appearance volume and of the motion field.
    pub fn volume_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if ![64, 128, 256].contains(&self.image_size) {
            return Err(Error::Config(format!("image_size must be 64, 128 or 256, got {}", self.image_size)));
        }
        let expected = [self.image_size / 4, self.image_size / 2, self.image_size];
        if self.generator_scales != expected {
            return Err(Error::Config(format!(
                "generator_scales must be successive doublings ending at the image size: {:?}",
                expected
            )));
        }
        if self.num_keypoints == 0 || self.expr_dim == 0 || self.base_width == 0 {
            return Err(Error::Config("num_keypoints, expr_dim and base_width must be positive".into()));
        }
        if self.volume_channels == 0 || self.volume_depth == 0 || self.keypoint_depth == 0 {
            return Err(Error::Config("volume and heatmap dimensions must be positive".into()));
        }
        if !(self.keypoint_temperature > 0.0) || !(self.heatmap_sigma > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn check_image(&self, image: &Tensor) -> Result<()> {
        let dims = image.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.image_size || dims[3] != self.image_size {
            return Err(Error::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got {:?}",
                image.shape(),
                s = self.image_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_keypoints(&self, kps: &Tensor) -> Result<()> {
        let dims = kps.dims();
        if dims.len() != 3 || dims[1] != self.num_keypoints || dims[2] != 3 {
            return Err(Error::Shape(format!(
                "expected keypoints of shape (B, {}, 3), got {:?}",
                self.num_keypoints,
                kps.shape()
            )));
        }
        Ok(())
    }
}

/// The expression feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionLatent {
    values: Vec<f64>,
}

impl ExpressionLatent {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("expression latent must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Reads row `row` of a `(B, E)` tensor.
    pub fn from_tensor_row(t: &Tensor, row: usize) -> Result<Self> {
        Self::new(t.get(row)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// `(1, E)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(self.values.clone(), (1, self.values.len()), &candle_core::Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Every generator-side network of the animation model.
pub struct FaceNets {
    pub config: NetConfig,
    pub detector: KeypointDetector,
    pub affine: AffineEstimator,
    pub expr_encoder: ExpressionEncoder,
    pub expr_decoder: ExpressionDecoder,
    pub appearance: AppearanceEncoder,
    pub motion: DenseMotionNet,
    pub generator: Generator,
    params: BTreeMap<String, Var>,
    dtype: DType,
}

/// Parameter-name prefixes, one per network.
pub const PARAM_GROUPS: [&str; 7] =
    ["detector", "affine", "expr_encoder", "expr_decoder", "appearance", "motion", "generator"];

impl FaceNets {
    pub fn new(config: &NetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let detector = KeypointDetector::new(&mut store.scope("detector"), config)?;
        let affine = AffineEstimator::new(&mut store.scope("affine"), config)?;
        let expr_encoder = ExpressionEncoder::new(&mut store.scope("expr_encoder"), config)?;
        let expr_decoder = ExpressionDecoder::new(&mut store.scope("expr_decoder"), config)?;
        let appearance = AppearanceEncoder::new(&mut store.scope("appearance"), config)?;
        let motion = DenseMotionNet::new(&mut store.scope("motion"), config)?;
        let generator = Generator::new(&mut store.scope("generator"), config)?;
        Ok(Self {
            config: config.clone(),
            detector,
            affine,
            expr_encoder,
            expr_decoder,
            appearance,
            motion,
            generator,
            params: store.into_vars(),
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }
}

/// Copies named tensors into existing variables, checking the name set and shapes.
pub fn load_params(params: &BTreeMap<String, Var>, values: &BTreeMap<String, Tensor>) -> Result<()> {
    if params.len() != values.len() || params.keys().any(|k| !values.contains_key(k)) {
        let missing: Vec<_> = params.keys().filter(|k| !values.contains_key(*k)).take(3).collect();
        return Err(Error::Checkpoint(format!(
            "parameter set mismatch ({} stored, {} expected; missing e.g. {:?})",
            values.len(),
            params.len(),
            missing
        )));
    }
    for (name, var) in params {
        let value = &values[name];
        if value.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
    }
    Ok(())
}
