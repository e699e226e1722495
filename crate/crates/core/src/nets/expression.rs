use candle_core::{Module, Tensor};

use super::layers::{Conv, Init, LayerNorm, Linear, ResBottleneck, Scope};
use super::NetConfig;
use crate::error::{Error, Result};

/// Channels of the final 4×4 map before the projection to `expr_dim`.
const BOTTLENECK_CHANNELS: usize = 16;
const HIDDEN: usize = 256;

/// Image → expression feature `f_δ`.
pub struct ExpressionEncoder {
    stem: Conv,
    blocks: Vec<ResBottleneck>,
    project: Linear,
    config: NetConfig,
}

impl ExpressionEncoder {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        let stem = s.conv("stem", 3, w, 3, 1)?;
        // stem + maxpool halve the image; each block halves again down to 4×4
        let mut size = config.image_size / 2;
        let mut blocks = Vec::new();
        let mut cin = w;
        while size > 4 {
            size /= 2;
            let cout = if size == 4 { BOTTLENECK_CHANNELS } else { 2 * w };
            blocks.push(ResBottleneck::new(s, &format!("block{}", blocks.len()), cin, cout, 2)?);
            cin = cout;
        }
        let project = s.linear("project", BOTTLENECK_CHANNELS * 16, config.expr_dim)?;
        Ok(Self { stem, blocks, project, config: config.clone() })
    }

    /// `(B,3,S,S)` → `(B,E)`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.config.check_image(image)?;
        let mut h = self.stem.forward(image)?.relu()?.max_pool2d(2)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let b = h.dim(0)?;
        Ok(self.project.forward(&h.reshape((b, BOTTLENECK_CHANNELS * 16))?)?)
    }
}

/// `(f_δ, p_C)` → per-keypoint deformation `δ`.
pub struct ExpressionDecoder {
    fc1: Linear,
    norm1: LayerNorm,
    fc2: Linear,
    norm2: LayerNorm,
    out: Linear,
    config: NetConfig,
}

impl ExpressionDecoder {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let k3 = 3 * config.num_keypoints;
        Ok(Self {
            fc1: s.linear("fc1", config.expr_dim + k3, HIDDEN)?,
            norm1: s.layer_norm("norm1", HIDDEN)?,
            fc2: s.linear("fc2", HIDDEN, HIDDEN)?,
            norm2: s.layer_norm("norm2", HIDDEN)?,
            out: s.linear_init("out", HIDDEN, k3, Init::Kaiming(0.05))?,
            config: config.clone(),
        })
    }

    /// `f_delta (B,E)`, `canonical (B,K,3)` → `(B,K,3)`, no output activation.
    pub fn forward(&self, f_delta: &Tensor, canonical: &Tensor) -> Result<Tensor> {
        self.config.check_keypoints(canonical)?;
        let (b, e) = f_delta.dims2()?;
        if e != self.config.expr_dim || canonical.dim(0)? != b {
            return Err(Error::Shape(format!(
                "expression feature {:?} does not pair with keypoints {:?}",
                f_delta.shape(),
                canonical.shape()
            )));
        }
        let k = self.config.num_keypoints;
        let x = Tensor::cat(&[f_delta, &canonical.reshape((b, 3 * k))?], 1)?;
        let h = self.norm1.forward(&self.fc1.forward(&x)?)?.relu()?;
        let h = self.norm2.forward(&self.fc2.forward(&h)?)?.relu()?;
        Ok(self.out.forward(&h)?.reshape((b, k, 3))?)
    }
}
