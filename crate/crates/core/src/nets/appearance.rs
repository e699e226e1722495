use candle_core::{Module, Tensor};

use super::layers::{Conv, ResBlock, Scope};
use super::NetConfig;
use crate::error::Result;

/// Source image → `C×D×H'×W'` appearance volume.
pub struct AppearanceEncoder {
    stem: Conv,
    down1: Conv,
    down2: Conv,
    res: ResBlock,
    lift: Conv,
    config: NetConfig,
}

impl AppearanceEncoder {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        Ok(Self {
            stem: s.conv("stem", 3, w, 3, 1)?,
            down1: s.conv("down1", w, 2 * w, 3, 2)?,
            down2: s.conv("down2", 2 * w, 4 * w, 3, 2)?,
            res: ResBlock::new(s, "res", 4 * w)?,
            lift: s.conv("lift", 4 * w, config.volume_channels * config.volume_depth, 1, 1)?,
            config: config.clone(),
        })
    }

    /// `(B,3,S,S)` → `(B,C,D,H',W')`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.config.check_image(image)?;
        let h = self.stem.forward(image)?.relu()?;
        let h = self.down1.forward(&h)?.relu()?;
        let h = self.down2.forward(&h)?.relu()?;
        let h = self.res.forward(&h)?;
        let v = self.lift.forward(&h)?;
        let b = v.dim(0)?;
        let n = self.config.volume_size();
        Ok(v.reshape((b, self.config.volume_channels, self.config.volume_depth, n, n))?)
    }
}
