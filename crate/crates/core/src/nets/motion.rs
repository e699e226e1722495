use candle_core::{DType, Module, Tensor};

use super::layers::{Conv, Init, Scope};
use super::NetConfig;
use crate::error::{Error, Result};
use crate::geometry::{identity_grid, project_orthographic_tensor, sparse_motion_tensor, warp};

/// Channels the appearance volume is compressed to before it is warped by
/// every candidate motion.
const COMPRESSED: usize = 4;

/// Network input before the hourglass.
#[derive(Clone, Debug)]
pub struct MotionInput {
    /// `(B,K+1,H',W',2)`; candidate 0 is the identity grid.
    pub candidates: Tensor,
    /// `(B,K+1,H',W')` driving-minus-source heatmaps; channel 0 is zero.
    pub heatmaps: Tensor,
    /// `(B,K+1,COMPRESSED,H',W')` compressed features warped by each candidate.
    pub deformed: Tensor,
}

impl MotionInput {
    /// `(B,(K+1)·(COMPRESSED+1),H',W')`.
    pub fn stacked(&self) -> Result<Tensor> {
        let (b, k1, h, w) = self.heatmaps.dims4()?;
        let both = Tensor::cat(&[&self.heatmaps.unsqueeze(2)?, &self.deformed], 2)?;
        Ok(both.reshape((b, k1 * (COMPRESSED + 1), h, w))?)
    }
}

#[derive(Clone, Debug)]
pub struct MotionOutput {
    /// `(B,K+1,H',W')`, softmax over channel 1.
    pub masks: Tensor,
    /// `(B,1,H',W')` in `[0,1]` when enabled.
    pub occlusion: Option<Tensor>,
    /// `(B,H',W',2)` dense backward flow.
    pub flow: Tensor,
}

/// Isotropic Gaussians centred on `points (B,K,2)` over an `n×n` grid → `(B,K,n,n)`.
pub fn gaussian_heatmaps(points: &Tensor, n: usize, sigma: f64) -> Result<Tensor> {
    let (b, k, two) = points.dims3()?;
    if two != 2 {
        return Err(Error::Shape(format!("expected 2D points, got {:?}", points.shape())));
    }
    let grid = identity_grid(n, n, points.dtype(), points.device())?.reshape((1, 1, n, n, 2))?;
    let d2 = grid.broadcast_sub(&points.reshape((b, k, 1, 1, 2))?)?.sqr()?.sum(4)?;
    Ok((d2 * (-0.5 / (sigma * sigma)))?.exp()?)
}

/// Predicts the mask stack and occlusion map from the appearance volume and
/// the source and driving keypoints.
pub struct DenseMotionNet {
    compress: Conv,
    enc1: Conv,
    enc2: Conv,
    enc3: Conv,
    dec2: Conv,
    dec1: Conv,
    mask_head: Conv,
    occlusion_head: Conv,
    config: NetConfig,
}

impl DenseMotionNet {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        let k1 = config.num_keypoints + 1;
        let cin = k1 * (COMPRESSED + 1);
        Ok(Self {
            compress: s.conv("compress", config.volume_channels * config.volume_depth, COMPRESSED, 1, 1)?,
            enc1: s.conv("enc1", cin, 2 * w, 3, 1)?,
            enc2: s.conv("enc2", 2 * w, 4 * w, 3, 1)?,
            enc3: s.conv("enc3", 4 * w, 4 * w, 3, 1)?,
            dec2: s.conv("dec2", 8 * w, 4 * w, 3, 1)?,
            dec1: s.conv("dec1", 6 * w, 2 * w, 3, 1)?,
            mask_head: s.conv_init("mask_head", 2 * w + cin, k1, 3, 1, Init::Kaiming(0.1))?,
            occlusion_head: s.conv_init("occlusion_head", 2 * w + cin, 1, 3, 1, Init::Kaiming(0.1))?,
            config: config.clone(),
        })
    }

    /// Builds the hourglass input. `volume (B,C,D,H',W')`, keypoints `(B,K,3)`,
    /// `jacobian (B,2,2)`.
    pub fn assemble_input(
        &self,
        volume: &Tensor,
        p_source: &Tensor,
        p_driving: &Tensor,
        jacobian: &Tensor,
    ) -> Result<MotionInput> {
        self.config.check_keypoints(p_source)?;
        self.config.check_keypoints(p_driving)?;
        let (b, c, d, h, w) = volume.dims5()?;
        let n = self.config.volume_size();
        if (c, d, h, w) != (self.config.volume_channels, self.config.volume_depth, n, n)
            || p_source.dim(0)? != b
            || p_driving.dim(0)? != b
            || jacobian.dims3()? != (b, 2, 2)
        {
            return Err(Error::Shape(format!(
                "motion inputs disagree: volume {:?}, keypoints {:?}/{:?}, jacobian {:?}",
                volume.shape(),
                p_source.shape(),
                p_driving.shape(),
                jacobian.shape()
            )));
        }
        let k = self.config.num_keypoints;
        let dtype = volume.dtype();
        let src2 = project_orthographic_tensor(p_source)?;
        let drv2 = project_orthographic_tensor(p_driving)?;

        let grid = identity_grid(n, n, dtype, volume.device())?;
        let sparse = sparse_motion_tensor(&grid, &src2, &drv2, &jacobian.to_dtype(dtype)?)?;
        let background = grid.reshape((1, 1, n, n, 2))?.broadcast_as((b, 1, n, n, 2))?;
        let candidates = Tensor::cat(&[&background, &sparse], 1)?;

        let sigma = self.config.heatmap_sigma;
        let diff = (gaussian_heatmaps(&drv2, n, sigma)? - gaussian_heatmaps(&src2, n, sigma)?)?;
        let zero = Tensor::zeros((b, 1, n, n), dtype, volume.device())?;
        let heatmaps = Tensor::cat(&[&zero, &diff], 1)?;

        let compressed = self.compress.forward(&volume.reshape((b, c * d, n, n))?)?;
        let repeated = compressed
            .unsqueeze(1)?
            .broadcast_as((b, k + 1, COMPRESSED, n, n))?
            .reshape((b * (k + 1), COMPRESSED, n, n))?;
        let deformed = warp(&repeated, &candidates.reshape((b * (k + 1), n, n, 2))?)?
            .reshape((b, k + 1, COMPRESSED, n, n))?;
        Ok(MotionInput { candidates, heatmaps, deformed })
    }

    pub fn forward(
        &self,
        volume: &Tensor,
        p_source: &Tensor,
        p_driving: &Tensor,
        jacobian: &Tensor,
    ) -> Result<MotionOutput> {
        let input = self.assemble_input(volume, p_source, p_driving, jacobian)?;
        let x = input.stacked()?;
        let (_, _, n, _) = x.dims4()?;
        let e1 = self.enc1.forward(&x)?.relu()?;
        let e2 = self.enc2.forward(&e1.avg_pool2d(2)?)?.relu()?;
        let e3 = self.enc3.forward(&e2.avg_pool2d(2)?)?.relu()?;
        let up2 = e3.upsample_nearest2d(n / 2, n / 2)?;
        let d2 = self.dec2.forward(&Tensor::cat(&[&up2, &e2], 1)?)?.relu()?;
        let up1 = d2.upsample_nearest2d(n, n)?;
        let d1 = self.dec1.forward(&Tensor::cat(&[&up1, &e1], 1)?)?.relu()?;
        let features = Tensor::cat(&[&d1, &x], 1)?;
        let masks = candle_nn::ops::softmax(&self.mask_head.forward(&features)?, 1)?;
        let occlusion = if self.config.use_occlusion {
            Some(candle_nn::ops::sigmoid(&self.occlusion_head.forward(&features)?)?)
        } else {
            None
        };
        let flow = crate::geometry::dense_flow_tensor(&input.candidates, &masks)?;
        Ok(MotionOutput { masks, occlusion, flow })
    }
}

/// `(B,2,2)` identity Jacobians.
pub(crate) fn identity_jacobians(b: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::eye(2, dtype, device)?.unsqueeze(0)?.broadcast_as((b, 2, 2))?.contiguous()?)
}
