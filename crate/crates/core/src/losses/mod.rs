//! Training objectives. Tensor losses take batched inputs and return scalar
//! tensors averaged over the batch.

mod perceptual;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use perceptual::{perceptual_multiscale, truth_pyramid, FeatureExtractor, SurrogatePerceptual};

use crate::error::{Error, Result};
use crate::geometry::{invert_points_tensor, AugmentTransform};
use crate::nets::DiscriminatorOutput;

pub const NUM_LANDMARKS: usize = 145;
pub const FACE_LANDMARKS: usize = 120;
pub const MOUTH_LANDMARKS: usize = 20;
pub const PUPIL_LANDMARKS: usize = 5;

/// 145 ordered 2D landmarks: face contour and features, mouth, pupils.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!("expected {NUM_LANDMARKS} landmarks, got {}", points.len())));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("landmarks must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn face(&self) -> &[[f64; 2]] {
        &self.points[..FACE_LANDMARKS]
    }

    pub fn mouth(&self) -> &[[f64; 2]] {
        &self.points[FACE_LANDMARKS..FACE_LANDMARKS + MOUTH_LANDMARKS]
    }

    pub fn pupil(&self) -> &[[f64; 2]] {
        &self.points[FACE_LANDMARKS + MOUTH_LANDMARKS..]
    }

    /// `(1,145,2)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.points.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (1, NUM_LANDMARKS, 2), device)?.to_dtype(dtype)?)
    }
}

/// Weights of the terms summed by [`total_loss`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub gan: f64,
    pub feature_matching: f64,
    pub equivariance: f64,
    pub keypoint_prior: f64,
    pub deformation_prior: f64,
    pub expression: f64,
    pub canonical: f64,
    pub landmark: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            gan: 1.0,
            feature_matching: 1.0,
            equivariance: 1.0,
            keypoint_prior: 1.0,
            deformation_prior: 1.0,
            expression: 1.0,
            canonical: 1.0,
            landmark: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            perceptual: 0.0,
            gan: 0.0,
            feature_matching: 0.0,
            equivariance: 0.0,
            keypoint_prior: 0.0,
            deformation_prior: 0.0,
            expression: 0.0,
            canonical: 0.0,
            landmark: 0.0,
        }
    }

    fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("perceptual", self.perceptual),
            ("gan", self.gan),
            ("feature_matching", self.feature_matching),
            ("equivariance", self.equivariance),
            ("keypoint_prior", self.keypoint_prior),
            ("deformation_prior", self.deformation_prior),
            ("expression", self.expression),
            ("canonical", self.canonical),
            ("landmark", self.landmark),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub lambda_face: f64,
    pub lambda_mouth: f64,
    pub lambda_pupil: f64,
    /// `D_t`: minimum squared distance between keypoint pairs.
    pub distance_threshold: f64,
    /// `z_t`: target mean keypoint depth.
    pub depth_target: f64,
    /// Convolutional levels of the perceptual pyramid (pixels are always level 0).
    pub perceptual_levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lambda_face: 1.0,
            lambda_mouth: 1.0,
            lambda_pupil: 1.0,
            distance_threshold: 0.1,
            depth_target: 0.33,
            perceptual_levels: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [("lambda_face", self.lambda_face), ("lambda_mouth", self.lambda_mouth), ("lambda_pupil", self.lambda_pupil)];
        for (name, w) in self.weights.entries().into_iter().chain(lambdas) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.distance_threshold > 0.0) {
            return Err(Error::Config("distance_threshold must be positive".into()));
        }
        if !self.depth_target.is_finite() {
            return Err(Error::Config("depth_target must be finite".into()));
        }
        if self.perceptual_levels > 4 {
            return Err(Error::Config("perceptual_levels is at most 4".into()));
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-24;

/// Euclidean norms over the last axis that are exactly zero at zero and have a
/// finite gradient there.
fn point_norms(diff: &Tensor) -> candle_core::Result<Tensor> {
    let last = diff.rank() - 1;
    let d2 = diff.sqr()?.sum(last)?;
    let floor = Tensor::new(NORM_EPS, diff.device())?.to_dtype(diff.dtype())?.sqrt()?;
    (d2 + NORM_EPS)?.sqrt()?.broadcast_sub(&floor)?.relu()
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding points `(.., N, d)`.
pub fn mean_point_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "point sets differ in shape")?;
    Ok(point_norms(&(a - b)?)?.mean_all()?)
}

/// Least-squares discriminator loss `½[(D(real) − 1)² + D(fake)²]`.
pub fn lsgan_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (real_logits - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_logits.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Least-squares generator loss `(D(fake) − 1)²`.
pub fn lsgan_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok((fake_logits - 1.0)?.sqr()?.mean_all()?)
}

/// Mean L1 between intermediate discriminator features, summed over layers.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real vs {} fake feature maps", real.len(), fake.len())));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        check_same(r, f, "feature maps differ in shape")?;
        let term = (r - f)?.abs()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Debug)]
pub struct GanLosses {
    pub d_loss: Tensor,
    pub g_loss: Tensor,
    pub feature_matching: Tensor,
}

/// All three adversarial terms from discriminator outputs on real and fake images.
/// The feature-matching target is detached.
pub fn gan_losses(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<GanLosses> {
    check_same(&real.logits, &fake.logits, "logit maps differ in shape")?;
    let real_feats: Vec<Tensor> = real.features.iter().map(|t| t.detach()).collect();
    Ok(GanLosses {
        d_loss: lsgan_d_loss(&real.logits, &fake.logits)?,
        g_loss: lsgan_g_loss(&fake.logits)?,
        feature_matching: feature_matching_loss(&real_feats, &fake.features)?,
    })
}

/// `Σ_k ‖p_X − T⁻¹(p_{T(X)})‖₁` on 2D points `(B,K,2)`, averaged over the batch.
pub fn equivariance_loss(p_x: &Tensor, p_tx: &Tensor, transforms: &[AugmentTransform]) -> Result<Tensor> {
    check_same(p_x, p_tx, "equivariance keypoints differ in shape")?;
    let b = p_x.dim(0)?;
    let back = invert_points_tensor(p_tx, transforms)?;
    Ok(((p_x - back)?.abs()?.sum_all()? / b as f64)?)
}

/// `Σ_{i<j} max(0, D_t − ‖p_i − p_j‖²) + |mean depth − z_t|` on `(B,K,3)`, averaged over the batch.
pub fn keypoint_prior_loss(p: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let (b, k, three) = p.dims3()?;
    if three != 3 {
        return Err(Error::Shape(format!("expected 3D keypoints, got {:?}", p.shape())));
    }
    let diff = p.unsqueeze(2)?.broadcast_sub(&p.unsqueeze(1)?)?;
    let d2 = diff.sqr()?.sum(3)?;
    let hinge = (d2.affine(-1.0, cfg.distance_threshold))?.relu()?;
    let upper: Vec<f64> = (0..k * k).map(|i| if i % k > i / k { 1.0 } else { 0.0 }).collect();
    let upper = Tensor::from_vec(upper, (1, k, k), p.device())?.to_dtype(p.dtype())?;
    let pairs = hinge.broadcast_mul(&upper)?.sum_all()?;
    let depth = p.narrow(2, 2, 1)?.mean(1)?.squeeze(1)?;
    let depth_term = (depth - cfg.depth_target)?.abs()?.sum_all()?;
    Ok(((pairs + depth_term)? / b as f64)?)
}

/// Mean absolute deformation.
pub fn deformation_prior_loss(delta: &Tensor) -> Result<Tensor> {
    Ok(delta.abs()?.mean_all()?)
}

/// Smallest feature norm accepted by [`expression_consistency_loss`].
pub const MIN_FEATURE_NORM: f64 = 1e-8;

/// `1 − cos(f1, f2)` per row of `(B,E)`, averaged over the batch.
pub fn expression_consistency_loss(f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
    check_same(f1, f2, "expression features differ in shape")?;
    let n1 = f1.sqr()?.sum_keepdim(1)?.sqrt()?;
    let n2 = f2.sqr()?.sum_keepdim(1)?.sqrt()?;
    let smallest = n1.minimum(&n2)?.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(smallest > MIN_FEATURE_NORM) {
        return Err(Error::InvalidArgument(format!("expression feature norm {smallest} is too small for a cosine")));
    }
    let cos = (f1 * f2)?.sum_keepdim(1)?.div(&(n1 * n2)?)?;
    Ok((1.0 - cos)?.mean_all()?)
}

/// Mean per-keypoint Euclidean distance between two canonical sets `(B,K,3)`.
pub fn canonical_consistency_loss(pc_s: &Tensor, pc_d: &Tensor) -> Result<Tensor> {
    if pc_s.dims() != pc_d.dims() {
        return Err(Error::Shape(format!("canonical sets {:?} and {:?}", pc_s.shape(), pc_d.shape())));
    }
    mean_point_distance(pc_s, pc_d)
}

/// Weighted mean point distances over the face, mouth and pupil partitions of `(B,145,2)`.
pub fn landmark_loss(l_g: &Tensor, l_d: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_same(l_g, l_d, "landmark sets differ in shape")?;
    if l_g.dim(1)? != NUM_LANDMARKS {
        return Err(Error::Shape(format!("expected {NUM_LANDMARKS} landmarks, got {:?}", l_g.shape())));
    }
    let part = |start, len| -> Result<Tensor> { mean_point_distance(&l_g.narrow(1, start, len)?, &l_d.narrow(1, start, len)?) };
    let face = (part(0, FACE_LANDMARKS)? * cfg.lambda_face)?;
    let mouth = (part(FACE_LANDMARKS, MOUTH_LANDMARKS)? * cfg.lambda_mouth)?;
    let pupil = (part(FACE_LANDMARKS + MOUTH_LANDMARKS, PUPIL_LANDMARKS)? * cfg.lambda_pupil)?;
    Ok(((face + mouth)? + pupil)?)
}

/// [`landmark_loss`] on typed sets, in f64.
pub fn landmark_loss_sets(l_g: &LandmarkSet, l_d: &LandmarkSet, cfg: &LossConfig) -> Result<f64> {
    let t = landmark_loss(&l_g.to_tensor(DType::F64, &Device::Cpu)?, &l_d.to_tensor(DType::F64, &Device::Cpu)?, cfg)?;
    Ok(t.to_scalar::<f64>()?)
}

/// Scalar loss terms of one training step. Every term must be set, to zero if unused.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub perceptual: Option<Tensor>,
    pub gan: Option<Tensor>,
    pub feature_matching: Option<Tensor>,
    pub equivariance: Option<Tensor>,
    pub keypoint_prior: Option<Tensor>,
    pub deformation_prior: Option<Tensor>,
    pub expression: Option<Tensor>,
    pub canonical: Option<Tensor>,
    pub landmark: Option<Tensor>,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Option<&Tensor>); 9] {
        [
            ("perceptual", self.perceptual.as_ref()),
            ("gan", self.gan.as_ref()),
            ("feature_matching", self.feature_matching.as_ref()),
            ("equivariance", self.equivariance.as_ref()),
            ("keypoint_prior", self.keypoint_prior.as_ref()),
            ("deformation_prior", self.deformation_prior.as_ref()),
            ("expression", self.expression.as_ref()),
            ("canonical", self.canonical.as_ref()),
            ("landmark", self.landmark.as_ref()),
        ]
    }

    /// Every term set to a scalar zero.
    pub fn zeros(dtype: DType, device: &Device) -> Result<Self> {
        let z = || Tensor::zeros((), dtype, device).map(Some);
        Ok(Self {
            perceptual: z()?,
            gan: z()?,
            feature_matching: z()?,
            equivariance: z()?,
            keypoint_prior: z()?,
            deformation_prior: z()?,
            expression: z()?,
            canonical: z()?,
            landmark: z()?,
        })
    }
}

/// Weighted sum of all terms. A term with weight zero does not enter the graph.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for ((name, term), (_, weight)) in terms.named().into_iter().zip(cfg.weights.entries()) {
        let term = term.ok_or_else(|| Error::MissingComponent(name.into()))?;
        if term.elem_count() != 1 {
            return Err(Error::Shape(format!("loss term {name} is not a scalar: {:?}", term.shape())));
        }
        if weight == 0.0 {
            continue;
        }
        let weighted = (term.reshape(())? * weight)?;
        total = Some(match total {
            None => weighted,
            Some(t) => (t + weighted)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let any = terms.perceptual.as_ref().expect("checked above");
            Ok(Tensor::zeros((), any.dtype(), any.device())?)
        }
    }
}
