use candle_core::{Module, Tensor};

use super::layers::{soft_argmax, Conv, Init, Linear, Scope};
use super::NetConfig;
use crate::error::Result;

/// Canonical keypoints from a 2D encoder and a heatmap volume decoder.
///
/// Each keypoint is the expectation of a softmax over a `D×H'×W'` grid of
/// coordinates in `[-1, 1]³`, so outputs are bounded by construction.
pub struct KeypointDetector {
    down1: Conv,
    down2: Conv,
    mid: Conv,
    head: Conv,
    coords: Tensor,
    config: NetConfig,
}

impl KeypointDetector {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        let bins = config.keypoint_depth;
        let size = config.volume_size();
        let mut coords = Vec::with_capacity(bins * size * size * 3);
        let axis = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
        for z in 0..bins {
            for y in 0..size {
                for x in 0..size {
                    coords.extend([axis(x, size), axis(y, size), axis(z, bins)]);
                }
            }
        }
        let coords = Tensor::from_vec(coords, (bins * size * size, 3), &candle_core::Device::Cpu)?
            .to_dtype(s.dtype())?;
        Ok(Self {
            down1: s.conv("down1", 3, w, 3, 2)?,
            down2: s.conv("down2", w, 2 * w, 3, 2)?,
            mid: s.conv("mid", 2 * w, 2 * w, 3, 1)?,
            head: s.conv_init("head", 2 * w, config.num_keypoints * bins, 1, 1, Init::Kaiming(0.5))?,
            coords,
            config: config.clone(),
        })
    }

    /// `(B,3,S,S)` → `(B,K,3)`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.config.check_image(image)?;
        let b = image.dim(0)?;
        let h = self.down1.forward(image)?.relu()?;
        let h = self.down2.forward(&h)?.relu()?;
        let h = self.mid.forward(&h)?.relu()?;
        let logits = self.head.forward(&h)?;
        let size = self.config.volume_size();
        let logits = (logits.reshape((
            b,
            self.config.num_keypoints,
            self.config.keypoint_depth * size * size,
        ))? / self.config.keypoint_temperature)?;
        Ok(soft_argmax(&logits, &self.coords)?)
    }
}

/// Scale `f` and translation `t` of a face.
#[derive(Clone, Debug)]
pub struct AffineEstimate {
    /// `(B, 1)`, strictly positive.
    pub scale: Tensor,
    /// `(B, 2)` in `[-1, 1]`.
    pub translation: Tensor,
}

/// Largest `|ln f|` the estimator can produce.
pub const LOG_SCALE_RANGE: f64 = 0.7;

pub struct AffineEstimator {
    down1: Conv,
    down2: Conv,
    down3: Conv,
    head: Linear,
    config: NetConfig,
}

impl AffineEstimator {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        Ok(Self {
            down1: s.conv("down1", 3, w, 3, 2)?,
            down2: s.conv("down2", w, 2 * w, 3, 2)?,
            down3: s.conv("down3", 2 * w, 2 * w, 3, 2)?,
            head: s.linear_init("head", 2 * w, 3, Init::Kaiming(0.1))?,
            config: config.clone(),
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<AffineEstimate> {
        self.config.check_image(image)?;
        let h = self.down1.forward(image)?.relu()?;
        let h = self.down2.forward(&h)?.relu()?;
        let h = self.down3.forward(&h)?.relu()?;
        let pooled = h.mean(3)?.mean(2)?;
        let raw = self.head.forward(&pooled)?;
        Ok(AffineEstimate {
            scale: positive_scale(&raw.narrow(1, 0, 1)?)?,
            translation: raw.narrow(1, 1, 2)?.tanh()?,
        })
    }
}

/// `f = exp(r · tanh(a))` with `r` = [`LOG_SCALE_RANGE`].
pub fn positive_scale(pre: &Tensor) -> candle_core::Result<Tensor> {
    (pre.tanh()? * LOG_SCALE_RANGE)?.exp()
}
