//! Forward pass shared by training and inference: motion estimation per frame,
//! keypoint composition, dense motion, warping and generation.

use candle_core::{DType, Tensor, Var};

use super::{
    identity_jacobians, DiscriminatorNet, FaceNets, GeneratorOutput, JacobianMode, MotionOutput, NetConfig, ParamStore,
};
use crate::error::Result;
use crate::geometry::{compose_keypoints_tensor, warp};

/// Everything the networks estimate from one batch of frames. The rotation is
/// supplied by the pose provider.
#[derive(Clone, Debug)]
pub struct MotionEstimate {
    /// `(B,K,3)`.
    pub canonical: Tensor,
    /// `(B,3,3)`.
    pub rotation: Tensor,
    /// `(B,1)`.
    pub scale: Tensor,
    /// `(B,2)`.
    pub translation: Tensor,
    /// `(B,E)`.
    pub f_delta: Tensor,
    /// `δ` decoded against this frame's own canonical keypoints, `(B,K,3)`.
    pub deformation: Tensor,
}

impl MotionEstimate {
    /// `R · f · (p_C + δ) + t` with this frame's own canonical keypoints.
    pub fn keypoints(&self) -> Result<Tensor> {
        Ok(compose_keypoints_tensor(&self.canonical, &self.rotation, &self.scale, &self.translation, &self.deformation)?)
    }
}

/// Generator output together with the motion that produced it.
pub struct Rendered {
    pub output: GeneratorOutput,
    pub motion: MotionOutput,
}

impl FaceNets {
    /// `image (B,3,S,S)`, `rotation (B,3,3)`.
    pub fn estimate(&self, image: &Tensor, rotation: &Tensor) -> Result<MotionEstimate> {
        let canonical = self.detector.forward(image)?;
        let affine = self.affine.forward(image)?;
        let f_delta = self.expr_encoder.forward(image)?;
        let deformation = self.expr_decoder.forward(&f_delta, &canonical)?;
        Ok(MotionEstimate {
            canonical,
            rotation: rotation.to_dtype(image.dtype())?,
            scale: affine.scale,
            translation: affine.translation,
            f_delta,
            deformation,
        })
    }

    /// Driving keypoints anchored on the source identity:
    /// `R_D · f_D · (p_C,S + dec(f_D, p_C,S)) + t_D`. Returns the keypoints and `δ`.
    pub fn transfer_keypoints(&self, source_canonical: &Tensor, driving: &MotionEstimate) -> Result<(Tensor, Tensor)> {
        let delta = self.expr_decoder.forward(&driving.f_delta, source_canonical)?;
        let p = compose_keypoints_tensor(source_canonical, &driving.rotation, &driving.scale, &driving.translation, &delta)?;
        Ok((p, delta))
    }

    /// `(B,2,2)` Jacobians: the in-plane block of `R_S · R_D⁻¹`, or identities.
    pub fn jacobians(&self, r_source: &Tensor, r_driving: &Tensor) -> Result<Tensor> {
        let b = r_source.dim(0)?;
        match self.config.jacobian {
            JacobianMode::Identity => identity_jacobians(b, r_source.dtype(), r_source.device()),
            JacobianMode::Rotation => {
                let rel = r_source.matmul(&r_driving.transpose(1, 2)?.contiguous()?)?;
                Ok(rel.narrow(1, 0, 2)?.narrow(2, 0, 2)?.contiguous()?)
            }
        }
    }

    /// Animates `source` from keypoints `p_source` to `p_driving`.
    pub fn render(&self, source: &Tensor, p_source: &Tensor, p_driving: &Tensor, jacobian: &Tensor) -> Result<Rendered> {
        let volume = self.appearance.forward(source)?;
        let motion = self.motion.forward(&volume, p_source, p_driving, jacobian)?;
        let (b, c, d, n, _) = volume.dims5()?;
        let mut warped = warp(&volume.reshape((b, c * d, n, n))?, &motion.flow)?;
        if let Some(occ) = &motion.occlusion {
            warped = warped.broadcast_mul(occ)?;
        }
        let output = self.generator.forward(&warped.reshape((b, c, d, n, n))?)?;
        Ok(Rendered { output, motion })
    }
}

/// Image discriminator with its own parameter set.
pub struct Discriminator {
    pub net: DiscriminatorNet,
    params: std::collections::BTreeMap<String, Var>,
}

impl Discriminator {
    pub fn new(config: &NetConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let net = DiscriminatorNet::new(&mut store.scope("discriminator"), config)?;
        Ok(Self { net, params: store.into_vars() })
    }

    pub fn params(&self) -> &std::collections::BTreeMap<String, Var> {
        &self.params
    }
}
