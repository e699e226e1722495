//! Inference: reenactment, motion-attribute editing, canonical faces and
//! expression interpolation through the VAE.
//!
//! Head rotations come from explicit angles when a frame carries them and are
//! frontal otherwise; no pose estimator runs at inference time.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr_vae::{interpolate, ExpressionVae, LatentCode};
use crate::geometry::{compose_keypoints, project_orthographic, rotations_tensor, KeypointSet, MotionParams, Rotation};
use crate::nets::{ExpressionLatent, FaceNets, MotionEstimate};
use crate::pipeline::{file_digest, load_vae, Checkpoint, FrameMeta, RunConfig, TrainState, VaeState};

/// One input frame: `image (3,S,S)` in `[-1,1]` and, optionally, its head pose
/// `(yaw, pitch, roll)` in radians.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub image: Tensor,
    pub pose: Option<[f64; 3]>,
}

impl FrameInput {
    pub fn new(image: Tensor) -> Self {
        Self { image, pose: None }
    }

    pub fn with_pose(image: Tensor, pose: [f64; 3]) -> Self {
        Self { image, pose: Some(pose) }
    }

    /// Pose read from frame metadata when present.
    pub fn from_frame(image: &Tensor, meta: Option<&FrameMeta>) -> Self {
        Self { image: image.clone(), pose: meta.map(|m| [m.yaw, m.pitch, m.roll]) }
    }

    fn angles(&self) -> [f64; 3] {
        self.pose.unwrap_or([0.0; 3])
    }

    fn rotation(&self) -> Rotation {
        let [y, p, r] = self.angles();
        Rotation::from_euler(y, p, r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReenactMode {
    #[default]
    SameIdentity,
    /// Scale comes from the source, rotation, translation and expression from the driving frame.
    CrossIdentity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseTransfer {
    #[default]
    Absolute,
    /// Driving rotation and translation are applied relative to the source pose.
    Relative,
}

#[derive(Clone, Debug, Default)]
pub struct ReenactOptions {
    pub mode: ReenactMode,
    pub pose: PoseTransfer,
    /// Driving frame whose pose counts as "no motion" under relative transfer.
    pub reference: Option<FrameInput>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionSource {
    Source,
    Driving,
    VaeLatent,
    Neutral,
}

/// Explicit motion overrides on top of a source (and optional driving) frame.
#[derive(Clone, Debug, Default)]
pub struct EditRequest {
    pub source: Option<FrameInput>,
    pub driving: Option<FrameInput>,
    pub yaw: Option<f64>,
    pub pitch: Option<f64>,
    pub roll: Option<f64>,
    pub translation: Option<[f64; 2]>,
    pub scale: Option<f64>,
    /// Defaults to `driving` with a driving frame and `neutral` without.
    pub expression: Option<ExpressionSource>,
    /// Latent code for `vae_latent`.
    pub latent: Option<Vec<f64>>,
    /// With a driving frame and `vae_latent`, interpolates between the two frames' codes.
    pub alpha: Option<f64>,
}

impl EditRequest {
    /// Request that renders the canonical face of `source`.
    pub fn neutral(source: FrameInput) -> Self {
        Self { source: Some(source), expression: Some(ExpressionSource::Neutral), ..Self::default() }
    }

    pub fn expression_source(&self) -> ExpressionSource {
        self.expression.unwrap_or(if self.driving.is_some() {
            ExpressionSource::Driving
        } else {
            ExpressionSource::Neutral
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.is_none() {
            return Err(Error::InvalidArgument("edit request needs a source image".into()));
        }
        let expr = self.expression_source();
        if expr == ExpressionSource::Driving && self.driving.is_none() {
            return Err(Error::InvalidArgument("expression source 'driving' needs a driving image".into()));
        }
        if let Some(a) = self.alpha {
            if self.driving.is_none() {
                return Err(Error::InvalidArgument("interpolation needs a driving image".into()));
            }
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {a}")));
            }
            if expr != ExpressionSource::VaeLatent {
                return Err(Error::InvalidArgument("alpha is only used with expression source 'vae_latent'".into()));
            }
        }
        if expr == ExpressionSource::VaeLatent && self.latent.is_none() && self.alpha.is_none() {
            return Err(Error::InvalidArgument("expression source 'vae_latent' needs a latent or alpha".into()));
        }
        if self.latent.is_some() && self.alpha.is_some() {
            return Err(Error::InvalidArgument("give either a latent or alpha, not both".into()));
        }
        for (name, v) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        if self.translation.is_some_and(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("translation must be finite".into()));
        }
        if self.scale.is_some_and(|s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        Ok(())
    }
}

/// Generated image with the driving keypoints that produced it.
#[derive(Clone, Debug)]
pub struct EditResult {
    /// `(3,S,S)` in `[-1,1]`.
    pub image: Tensor,
    pub keypoints: KeypointSet,
    pub keypoints_2d: Vec<[f64; 2]>,
    pub motion: MotionParams,
}

#[derive(Clone, Debug)]
pub struct InterpolationResult {
    pub image: Tensor,
    pub latent: LatentCode,
    /// Decoded expression feature `f̂_δ`.
    pub feature: ExpressionLatent,
    /// Per-keypoint deformation `δ`.
    pub deformation: Vec<[f64; 3]>,
    pub keypoints: KeypointSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    #[serde(rename = "K")]
    pub num_keypoints: usize,
    pub resolution: usize,
    pub checkpoint_hash: String,
    pub step: u64,
    pub has_vae: bool,
}

/// Per-frame estimates in f64 with the source canonical keypoints.
struct FrameEstimate {
    tensors: MotionEstimate,
    rotation: Rotation,
    angles: [f64; 3],
    scale: f64,
    translation: [f64; 2],
}

/// Immutable trained model.
pub struct Animator {
    config: RunConfig,
    nets: FaceNets,
    vae: Option<ExpressionVae>,
    hash: String,
    step: u64,
}

fn to_points3(t: &Tensor) -> Result<Vec<[f64; 3]>> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

impl Animator {
    pub fn new(state: TrainState, vae: Option<VaeState>, hash: String) -> Self {
        Self { config: state.config, nets: state.nets, vae: vae.map(|v| v.vae), hash, step: state.step }
    }

    /// Loads the model and, if `vae_path` is given or the checkpoint carries one, the VAE.
    pub fn load(path: &Path, vae_path: Option<&Path>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let state = ckpt.restore()?;
        let vae = match vae_path {
            Some(p) => Some(load_vae(p)?),
            None if ckpt.vae.is_some() => Some(ckpt.restore_vae()?),
            None => None,
        };
        if let Some(v) = &vae {
            if v.config.expr_dim != state.config.net.expr_dim {
                return Err(Error::Checkpoint("VAE feature size does not match the model".into()));
            }
        }
        Ok(Self::new(state, vae, file_digest(&bytes)))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn nets(&self) -> &FaceNets {
        &self.nets
    }

    pub fn has_vae(&self) -> bool {
        self.vae.is_some()
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            num_keypoints: self.config.net.num_keypoints,
            resolution: self.config.net.image_size,
            checkpoint_hash: self.hash.clone(),
            step: self.step,
            has_vae: self.vae.is_some(),
        }
    }

    fn batch(&self, frame: &FrameInput) -> Result<Tensor> {
        let s = self.config.net.image_size;
        if frame.image.dims() != [3, s, s] {
            return Err(Error::Shape(format!("expected a (3, {s}, {s}) image, got {:?}", frame.image.shape())));
        }
        Ok(frame.image.to_dtype(self.nets.dtype())?.unsqueeze(0)?)
    }

    fn estimate(&self, frame: &FrameInput) -> Result<FrameEstimate> {
        let rotation = frame.rotation();
        let r = rotations_tensor(&[rotation], self.nets.dtype(), &Device::Cpu)?;
        let tensors = self.nets.estimate(&self.batch(frame)?, &r)?;
        let scale = tensors.scale.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0];
        let t = tensors.translation.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(FrameEstimate { tensors, rotation, angles: frame.angles(), scale, translation: [t[0], t[1]] })
    }

    /// `δ = dec(f, p_C,S)`.
    fn deformation(&self, f_delta: &Tensor, canonical: &Tensor) -> Result<Vec<[f64; 3]>> {
        to_points3(&self.nets.expr_decoder.forward(f_delta, canonical)?)
    }

    fn render(&self, source: &FrameInput, est_s: &FrameEstimate, driving: &KeypointSet, r_d: Rotation) -> Result<Tensor> {
        let dtype = self.nets.dtype();
        let p_s = est_s.tensors.keypoints()?;
        let p_d = driving.to_tensor(dtype, &Device::Cpu)?;
        let r_s = rotations_tensor(&[est_s.rotation], dtype, &Device::Cpu)?;
        let r_d = rotations_tensor(&[r_d], dtype, &Device::Cpu)?;
        let jac = self.nets.jacobians(&r_s, &r_d)?;
        let out = self.nets.render(&self.batch(source)?, &p_s, &p_d, &jac)?;
        Ok(out.output.full().squeeze(0)?.to_dtype(DType::F32)?)
    }

    fn canonical(est: &FrameEstimate) -> Result<KeypointSet> {
        KeypointSet::from_tensor(&est.tensors.canonical.to_dtype(DType::F64)?)
    }

    pub fn reenact(&self, source: &FrameInput, driving: &FrameInput, opts: &ReenactOptions) -> Result<EditResult> {
        let est_s = self.estimate(source)?;
        let est_d = self.estimate(driving)?;
        let deformation = self.deformation(&est_d.tensors.f_delta, &est_s.tensors.canonical)?;
        let (rotation, translation) = match opts.pose {
            PoseTransfer::Absolute => (est_d.rotation, est_d.translation),
            PoseTransfer::Relative => {
                let reference = opts.reference.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("relative pose transfer needs a reference driving frame".into())
                })?;
                let est_r = self.estimate(reference)?;
                let rotation = est_d.rotation.compose(&est_r.rotation.transpose()).compose(&est_s.rotation);
                let t = |i: usize| est_s.translation[i] + est_d.translation[i] - est_r.translation[i];
                (rotation, [t(0), t(1)])
            }
        };
        let scale = match opts.mode {
            ReenactMode::SameIdentity => est_d.scale,
            ReenactMode::CrossIdentity => est_s.scale,
        };
        let motion = MotionParams { rotation, translation, scale, deformation };
        self.finish(source, &est_s, motion)
    }

    fn finish(&self, source: &FrameInput, est_s: &FrameEstimate, motion: MotionParams) -> Result<EditResult> {
        let keypoints = compose_keypoints(&Self::canonical(est_s)?, &motion)?;
        let image = self.render(source, est_s, &keypoints, motion.rotation)?;
        Ok(EditResult { image, keypoints_2d: project_orthographic(&keypoints), keypoints, motion })
    }

    fn vae(&self) -> Result<&ExpressionVae> {
        self.vae.as_ref().ok_or(Error::MissingVae)
    }

    /// Posterior mean of a frame's expression code.
    fn latent_mean(&self, f_delta: &Tensor) -> Result<LatentCode> {
        let (mu, _) = self.vae()?.encode(&f_delta.to_dtype(self.vae()?.dtype())?)?;
        LatentCode::new(mu.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    fn decode_latent(&self, z: &LatentCode) -> Result<Tensor> {
        let vae = self.vae()?;
        vae.decode_latent(z)?.to_tensor(self.nets.dtype())
    }

    pub fn edit_attributes(&self, req: &EditRequest) -> Result<EditResult> {
        req.validate()?;
        let source = req.source.as_ref().expect("validated");
        let est_s = self.estimate(source)?;
        let est_d = req.driving.as_ref().map(|d| self.estimate(d)).transpose()?;
        let k = self.config.net.num_keypoints;

        let base = match &est_d {
            Some(d) => MotionParams {
                rotation: d.rotation,
                translation: d.translation,
                scale: d.scale,
                deformation: vec![[0.0; 3]; k],
            },
            None => MotionParams::neutral(k),
        };
        let angles = est_d.as_ref().map(|d| d.angles).unwrap_or([0.0; 3]);
        let rotation = if req.yaw.is_some() || req.pitch.is_some() || req.roll.is_some() {
            Rotation::from_euler(req.yaw.unwrap_or(angles[0]), req.pitch.unwrap_or(angles[1]), req.roll.unwrap_or(angles[2]))
        } else {
            base.rotation
        };
        let canonical_t = &est_s.tensors.canonical;
        let deformation = match req.expression_source() {
            ExpressionSource::Neutral => vec![[0.0; 3]; k],
            ExpressionSource::Source => self.deformation(&est_s.tensors.f_delta, canonical_t)?,
            ExpressionSource::Driving => {
                self.deformation(&est_d.as_ref().expect("validated").tensors.f_delta, canonical_t)?
            }
            ExpressionSource::VaeLatent => {
                let z = match (&req.latent, req.alpha) {
                    (Some(z), _) => {
                        let z = LatentCode::new(z.clone())?;
                        if z.dim() != self.vae()?.config().latent_dim {
                            return Err(Error::InvalidArgument(format!(
                                "latent has {} entries, the VAE expects {}",
                                z.dim(),
                                self.vae()?.config().latent_dim
                            )));
                        }
                        z
                    }
                    (None, Some(alpha)) => {
                        let z_s = self.latent_mean(&est_s.tensors.f_delta)?;
                        let z_d = self.latent_mean(&est_d.as_ref().expect("validated").tensors.f_delta)?;
                        interpolate(&z_s, &z_d, alpha)?
                    }
                    (None, None) => unreachable!("validated"),
                };
                self.deformation(&self.decode_latent(&z)?, canonical_t)?
            }
        };
        let motion = MotionParams {
            rotation,
            translation: req.translation.unwrap_or(base.translation),
            scale: req.scale.unwrap_or(base.scale),
            deformation,
        };
        self.finish(source, &est_s, motion)
    }

    /// The source face with neutral pose and expression.
    pub fn canonical_face(&self, source: &FrameInput) -> Result<EditResult> {
        self.edit_attributes(&EditRequest::neutral(source.clone()))
    }

    /// Expression interpolated in the VAE latent space, posed like `driving`.
    pub fn interpolate_expression(&self, source: &FrameInput, driving: &FrameInput, alpha: f64) -> Result<InterpolationResult> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        self.vae()?;
        let est_s = self.estimate(source)?;
        let est_d = self.estimate(driving)?;
        let z_s = self.latent_mean(&est_s.tensors.f_delta)?;
        let z_d = self.latent_mean(&est_d.tensors.f_delta)?;
        let latent = interpolate(&z_s, &z_d, alpha)?;
        let f_hat = self.decode_latent(&latent)?;
        let deformation = self.deformation(&f_hat, &est_s.tensors.canonical)?;
        let motion = MotionParams {
            rotation: est_d.rotation,
            translation: est_d.translation,
            scale: est_d.scale,
            deformation: deformation.clone(),
        };
        let res = self.finish(source, &est_s, motion)?;
        Ok(InterpolationResult {
            image: res.image,
            latent,
            feature: ExpressionLatent::from_tensor_row(&f_hat, 0)?,
            deformation,
            keypoints: res.keypoints,
        })
    }

    /// Posterior-mean latent codes of two frames.
    pub fn latent_codes(&self, source: &FrameInput, driving: &FrameInput) -> Result<(LatentCode, LatentCode)> {
        let est_s = self.estimate(source)?;
        let est_d = self.estimate(driving)?;
        Ok((self.latent_mean(&est_s.tensors.f_delta)?, self.latent_mean(&est_d.tensors.f_delta)?))
    }

    /// `f̂_δ = decode(z)`.
    pub fn decode_feature(&self, z: &LatentCode) -> Result<ExpressionLatent> {
        self.vae()?.decode_latent(z)
    }

    /// Canonical keypoints `p_C` of a frame.
    pub fn canonical_keypoints(&self, frame: &FrameInput) -> Result<KeypointSet> {
        Self::canonical(&self.estimate(frame)?)
    }

    /// The frame's own posed keypoints `R · f · (p_C + δ) + t`, projected to 2D.
    pub fn keypoints_2d(&self, frame: &FrameInput) -> Result<Vec<[f64; 2]>> {
        let est = self.estimate(frame)?;
        let kps = KeypointSet::from_tensor(&est.tensors.keypoints()?.to_dtype(DType::F64)?)?;
        Ok(project_orthographic(&kps))
    }
}

#[cfg(test)]
mod tests;
