use candle_core::{Module, Tensor};

use super::layers::{Conv, Init, ResBlock, Scope};
use super::NetConfig;
use crate::error::{Error, Result};

/// Images at every generator scale, coarse to fine, each `(B,3,s,s)` in `[-1,1]`.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub images: Vec<Tensor>,
}

impl GeneratorOutput {
    /// The full-resolution image.
    pub fn full(&self) -> &Tensor {
        self.images.last().expect("generator has at least one scale")
    }
}

struct Stage {
    res: ResBlock,
    to_image: Conv,
    /// Applied after concatenating the image and upsampling; absent at the last scale.
    up: Option<Conv>,
}

/// Multi-scale generator over the warped appearance volume.
pub struct Generator {
    squeeze: Conv,
    stages: Vec<Stage>,
    config: NetConfig,
}

impl Generator {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        let mut width = 4 * w;
        let squeeze = s.conv("squeeze", config.volume_channels * config.volume_depth, width, 1, 1)?;
        let n = config.generator_scales.len();
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let mut st = s.push(&format!("scale{i}"));
            let res = ResBlock::new(&mut st, "res", width)?;
            let to_image = st.conv_init("to_image", width, 3, 3, 1, Init::Kaiming(0.5))?;
            let up = if i + 1 < n {
                let next = (width / 2).max(w);
                let conv = st.conv("up", width + 3, next, 3, 1)?;
                width = next;
                Some(conv)
            } else {
                None
            };
            stages.push(Stage { res, to_image, up });
        }
        Ok(Self { squeeze, stages, config: config.clone() })
    }

    /// `(B,C,D,H',W')` → one image per configured scale.
    pub fn forward(&self, volume: &Tensor) -> Result<GeneratorOutput> {
        let (b, c, d, h, w) = volume.dims5()?;
        let n = self.config.volume_size();
        if (c, d, h, w) != (self.config.volume_channels, self.config.volume_depth, n, n) {
            return Err(Error::Shape(format!("generator cannot take volume {:?}", volume.shape())));
        }
        let mut x = self.squeeze.forward(&volume.reshape((b, c * d, h, w))?)?.relu()?;
        let mut images = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.res.forward(&x)?;
            let image = stage.to_image.forward(&x)?.tanh()?;
            if let Some(up) = &stage.up {
                let (_, _, sh, sw) = x.dims4()?;
                let joined = Tensor::cat(&[&x, &image], 1)?.upsample_nearest2d(2 * sh, 2 * sw)?;
                x = up.forward(&joined)?.relu()?;
            }
            images.push(image);
        }
        Ok(GeneratorOutput { images })
    }
}
