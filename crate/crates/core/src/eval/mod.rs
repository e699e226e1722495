//! Reconstruction and keypoint-transfer metrics that need no pretrained networks.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::animator::{Animator, FrameInput, ReenactMode, ReenactOptions};
use crate::error::{Error, Result};
use crate::pipeline::Dataset;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;
/// MSE below which PSNR is capped.
pub const PSNR_MIN_MSE: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Metrics that need pretrained networks and are not computed.
pub const UNAVAILABLE_METRICS: [&str; 5] = ["FID", "LPIPS", "CSIM", "AED", "APD"];

/// `(C,H,W)` image with values in `[0,1]`, as f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!("{} values for a {channels}x{height}x{width} image", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    /// From a `(C,H,W)` tensor already in `[0,1]`.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    /// From a `(C,H,W)` tensor in `[-1,1]`.
    pub fn from_signed_tensor(t: &Tensor) -> Result<Self> {
        Self::from_unit_tensor(&((t.to_dtype(DType::F64)? + 1.0)? * 0.5)?)
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::Shape(format!(
                "images differ in shape: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(())
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len().max(1) as f64)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len().max(1) as f64)
}

/// `10 · log₁₀(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MIN_MSE {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

/// Mean SSIM over all pixels and channels. The Gaussian window is cut at the
/// image border and renormalized over the pixels that remain.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let g = gaussian_1d();
    let r = (SSIM_WINDOW / 2) as isize;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (h, w) = (a.height as isize, a.width as isize);
    let mut total = 0.0;
    for c in 0..a.channels {
        let plane = c * a.height * a.width;
        let at = |img: &Image, y: isize, x: isize| img.data[plane + (y * w + x) as usize];
        for y in 0..h {
            for x in 0..w {
                let (mut ws, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let (va, vb) = (at(a, yy, xx), at(b, yy, xx));
                        ws += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / ws, mb / ws);
                let va = saa / ws - ma * ma;
                let vb = sbb / ws - mb * mb;
                let cov = sab / ws - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (a.channels * a.height * a.width) as f64)
}

/// Mean Euclidean distance between corresponding 2D points.
pub fn keypoint_distance(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} reference points", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).sum::<f64>()
        / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    SameIdentity,
    CrossIdentity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub source_sequence: String,
    pub driving_sequence: String,
    pub driving_index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub keypoint_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub keypoint_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub sequences: usize,
    pub config_hash: String,
    pub frames: Vec<FrameRecord>,
    pub aggregate: Aggregate,
    pub unavailable: Vec<String>,
}

/// Scores one generated frame against its reference. Images are `(3,S,S)` in `[-1,1]`.
pub fn score_frame(
    generated: &Tensor,
    truth: &Tensor,
    kp_generated: &[[f64; 2]],
    kp_truth: &[[f64; 2]],
) -> Result<(f64, f64, f64, f64)> {
    let (g, t) = (Image::from_signed_tensor(generated)?, Image::from_signed_tensor(truth)?);
    Ok((psnr(&g, &t)?, ssim(&g, &t)?, l1(&g, &t)?, keypoint_distance(kp_generated, kp_truth)?))
}

impl EvalReport {
    pub fn new(protocol: Protocol, sequences: usize, config_hash: String, frames: Vec<FrameRecord>) -> Self {
        let n = frames.len();
        let mean = |f: fn(&FrameRecord) -> f64| if n == 0 { 0.0 } else { frames.iter().map(f).sum::<f64>() / n as f64 };
        let aggregate = Aggregate {
            frames: n,
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            l1: mean(|r| r.l1),
            keypoint_distance: mean(|r| r.keypoint_distance),
        };
        Self {
            protocol,
            sequences,
            config_hash,
            frames,
            aggregate,
            unavailable: UNAVAILABLE_METRICS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let a = &self.aggregate;
        let mut out = format!(
            "protocol    {:?}\nsequences   {}\nframes      {}\nconfig      {}\n\n",
            self.protocol, self.sequences, a.frames, self.config_hash
        );
        out.push_str(&format!("{:<10}{:>12}\n", "metric", "mean"));
        for (name, v) in [("PSNR", a.psnr), ("SSIM", a.ssim), ("L1", a.l1), ("AKD", a.keypoint_distance)] {
            out.push_str(&format!("{name:<10}{v:>12.4}\n"));
        }
        for name in &self.unavailable {
            out.push_str(&format!("{name:<10}{:>12}\n", "unavailable"));
        }
        out
    }

    /// One record per frame followed by one aggregate record.
    pub fn to_jsonl(&self) -> Result<String> {
        let enc = |v: serde_json::Value| serde_json::to_string(&v).map_err(|e| Error::InvalidArgument(e.to_string()));
        let mut out = String::new();
        for f in &self.frames {
            let mut v = serde_json::to_value(f).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            v["kind"] = "frame".into();
            out.push_str(&enc(v)?);
            out.push('\n');
        }
        let mut v = serde_json::to_value(&self.aggregate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        v["kind"] = "aggregate".into();
        v["protocol"] = serde_json::to_value(self.protocol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        v["config_hash"] = self.config_hash.clone().into();
        v["unavailable"] = self.unavailable.clone().into();
        out.push_str(&enc(v)?);
        out.push('\n');
        Ok(out)
    }
}

/// First frame of each sequence is the source. Same-identity drives it with
/// the rest of its own sequence; cross-identity with every frame of every other
/// sequence. Keypoint distance compares the model's keypoints on the
/// generated frame with those on the real driving frame.
pub fn evaluate(animator: &Animator, dataset: &Dataset, protocol: Protocol) -> Result<EvalReport> {
    if dataset.sequences.is_empty() {
        return Err(Error::Dataset("nothing to evaluate: dataset is empty".into()));
    }
    if dataset.sequences.iter().any(|s| s.frames.len() < 2) {
        return Err(Error::Dataset("every sequence needs at least 2 frames".into()));
    }
    if protocol == Protocol::CrossIdentity && dataset.sequences.len() < 2 {
        return Err(Error::Dataset("cross-identity evaluation needs at least 2 sequences".into()));
    }
    let mode = match protocol {
        Protocol::SameIdentity => ReenactMode::SameIdentity,
        Protocol::CrossIdentity => ReenactMode::CrossIdentity,
    };
    let opts = ReenactOptions { mode, ..ReenactOptions::default() };
    let mut records = Vec::new();
    for (si, src_seq) in dataset.iter().enumerate() {
        let first = &src_seq.frames[0];
        let source = FrameInput::from_frame(&first.image, first.meta.as_ref());
        for (di, drv_seq) in dataset.iter().enumerate() {
            let same = si == di;
            if same != (protocol == Protocol::SameIdentity) {
                continue;
            }
            let start = if same { 1 } else { 0 };
            for (fi, frame) in drv_seq.frames.iter().enumerate().skip(start) {
                let driving = FrameInput::from_frame(&frame.image, frame.meta.as_ref());
                let out = animator.reenact(&source, &driving, &opts)?;
                let kp_g = animator.keypoints_2d(&FrameInput { image: out.image.clone(), pose: driving.pose })?;
                let kp_d = animator.keypoints_2d(&driving)?;
                let (p, s, l, k) = score_frame(&out.image, &frame.image, &kp_g, &kp_d)?;
                records.push(FrameRecord {
                    source_sequence: src_seq.name.clone(),
                    driving_sequence: drv_seq.name.clone(),
                    driving_index: fi,
                    psnr: p,
                    ssim: s,
                    l1: l,
                    keypoint_distance: k,
                });
            }
        }
    }
    let hash = config_hash(&animator.config().to_toml()?);
    Ok(EvalReport::new(protocol, dataset.sequences.len(), hash, records))
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
