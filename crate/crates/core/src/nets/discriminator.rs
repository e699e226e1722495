use candle_core::{Module, Tensor};

use super::layers::{leaky_relu, Conv, Init, Scope};
use super::NetConfig;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// Intermediate activations, shallow to deep.
    pub features: Vec<Tensor>,
    /// `(B,1,h,w)` patch logits.
    pub logits: Tensor,
}

/// Patch discriminator.
pub struct DiscriminatorNet {
    convs: Vec<Conv>,
    logits: Conv,
    config: NetConfig,
}

impl DiscriminatorNet {
    pub fn new(s: &mut Scope, config: &NetConfig) -> Result<Self> {
        let w = config.base_width;
        let widths = [3, w, 2 * w, 4 * w];
        let convs = (0..3)
            .map(|i| s.conv(&format!("conv{i}"), widths[i], widths[i + 1], 3, 2))
            .collect::<Result<Vec<_>>>()?;
        let logits = s.conv_init("logits", 4 * w, 1, 3, 1, Init::Kaiming(0.5))?;
        Ok(Self { convs, logits, config: config.clone() })
    }

    pub fn forward(&self, image: &Tensor) -> Result<DiscriminatorOutput> {
        self.config.check_image(image)?;
        let mut x = image.clone();
        let mut features = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?)?;
            features.push(x.clone());
        }
        Ok(DiscriminatorOutput { logits: self.logits.forward(&x)?, features })
    }
}
