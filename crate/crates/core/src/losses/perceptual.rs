use candle_core::{DType, Module, Tensor};

use crate::error::{Error, Result};
use crate::nets::layers::{Conv, ParamStore};
use crate::nets::GeneratorOutput;

/// Features compared by the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    /// Feature maps of `(B,3,s,s)` images, shallow to deep. Any size `s ≥ 8`.
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;

    /// Global identity descriptor `(B,F)`, compared at full resolution only.
    fn identity(&self, image: &Tensor) -> Result<Option<Tensor>>;
}

/// Frozen random-weight convolutional pyramid. Level 0 is the image itself.
pub struct SurrogatePerceptual {
    levels: Vec<Conv>,
    identity: [Conv; 2],
}

const WIDTHS: [usize; 5] = [3, 8, 16, 32, 32];

impl SurrogatePerceptual {
    pub fn new(levels: usize, seed: u64, dtype: DType) -> Result<Self> {
        if levels >= WIDTHS.len() {
            return Err(Error::Config(format!("at most {} perceptual levels", WIDTHS.len() - 1)));
        }
        let mut store = ParamStore::frozen(seed, dtype);
        let mut s = store.scope("perceptual");
        let convs = (0..levels)
            .map(|i| s.conv(&format!("level{i}"), WIDTHS[i], WIDTHS[i + 1], 3, 1))
            .collect::<Result<Vec<_>>>()?;
        let identity = [s.conv("identity0", 3, 16, 3, 2)?, s.conv("identity1", 16, 32, 3, 2)?];
        Ok(Self { levels: convs, identity })
    }
}

impl FeatureExtractor for SurrogatePerceptual {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![image.clone()];
        let mut x = image.clone();
        for (i, conv) in self.levels.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            x = conv.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn identity(&self, image: &Tensor) -> Result<Option<Tensor>> {
        let h = self.identity[0].forward(image)?.relu()?;
        let h = self.identity[1].forward(&h)?.relu()?;
        Ok(Some(h.mean(3)?.mean(2)?))
    }
}

/// Box-downsampled copies of `image (B,3,S,S)` at each size in `scales`.
pub fn truth_pyramid(image: &Tensor, scales: &[usize]) -> Result<Vec<Tensor>> {
    let s = image.dim(3)?;
    scales
        .iter()
        .map(|&n| {
            if n == 0 || s % n != 0 {
                return Err(Error::Shape(format!("cannot downsample {s} to {n}")));
            }
            let f = s / n;
            Ok(if f == 1 { image.clone() } else { image.avg_pool2d(f)? })
        })
        .collect()
}

/// Sum over scales and feature levels of mean L1 feature differences, plus the
/// identity-descriptor L1 at full resolution.
pub fn perceptual_multiscale(gen: &GeneratorOutput, truth: &[Tensor], extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    if gen.images.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!("{} generated scales vs {} ground truths", gen.images.len(), truth.len())));
    }
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            None => t,
            Some(acc) => (acc + t)?,
        });
        Ok(())
    };
    for (g, t) in gen.images.iter().zip(truth) {
        if g.dims() != t.dims() {
            return Err(Error::Shape(format!("scale mismatch: generated {:?} vs truth {:?}", g.shape(), t.shape())));
        }
        let fg = extractor.features(g)?;
        let ft = extractor.features(t)?;
        for (a, b) in fg.iter().zip(&ft) {
            add((a - b)?.abs()?.mean_all()?)?;
        }
    }
    let (g, t) = (gen.full(), truth.last().expect("non-empty"));
    if let (Some(a), Some(b)) = (extractor.identity(g)?, extractor.identity(t)?) {
        add((a - b)?.abs()?.mean_all()?)?;
    }
    Ok(total.expect("at least one scale"))
}
