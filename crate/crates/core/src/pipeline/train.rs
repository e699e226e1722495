use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, Dataset, Frame, FrameMeta, RunConfig, Sequence};
use super::optim::{grad_norms, Adam};
use crate::error::{Error, Result};
use crate::geometry::{apply_augment, project_orthographic_tensor, rotations_tensor, AugmentTransform, Rotation};
use crate::losses::{
    canonical_consistency_loss, deformation_prior_loss, equivariance_loss, expression_consistency_loss, gan_losses,
    keypoint_prior_loss, landmark_loss, lsgan_d_loss, perceptual_multiscale, total_loss, truth_pyramid, LossTerms,
    SurrogatePerceptual,
};
use crate::nets::{pose_provider, Discriminator, FaceNets, PoseProvider, SurrogateLandmarks, PARAM_GROUPS};

/// Seeds of the frozen loss networks. Fixed so that every run optimizes the same objective.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_0001;
pub const LANDMARK_SEED: u64 = 0x5eed_0002;

/// Source and driving frame from one sequence.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub source: Frame,
    pub driving: Frame,
}

impl FramePair {
    pub fn new(source: Frame, driving: Frame) -> Result<Self> {
        if source.image.dims() != driving.image.dims() {
            return Err(Error::Shape(format!(
                "pair frames differ in shape: {:?} vs {:?}",
                source.image.shape(),
                driving.image.shape()
            )));
        }
        Ok(Self { source, driving })
    }
}

/// RNG for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Two distinct frame indices, uniformly over ordered pairs.
pub fn sample_indices(len: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::Dataset(format!("sequence has {len} frames, need at least 2")));
    }
    let i = rng.random_range(0..len);
    let mut j = rng.random_range(0..len - 1);
    if j >= i {
        j += 1;
    }
    Ok((i, j))
}

pub fn sample_pair(sequence: &Sequence, rng: &mut impl Rng) -> Result<FramePair> {
    let (i, j) = sample_indices(sequence.frames.len(), rng)?;
    FramePair::new(sequence.frames[i].clone(), sequence.frames[j].clone())
}

/// A sequence chosen uniformly, then a pair from it, per batch entry.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<FramePair>> {
    if dataset.sequences.is_empty() {
        return Err(Error::Dataset("dataset has no sequences".into()));
    }
    (0..batch_size)
        .map(|_| sample_pair(&dataset.sequences[rng.random_range(0..dataset.sequences.len())], rng))
        .collect()
}

/// Draws a similarity transform within `ranges`.
pub fn sample_transform(rng: &mut impl Rng, ranges: &AugmentConfig) -> Result<AugmentTransform> {
    let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let max_angle = ranges.max_rotation_deg.to_radians();
    let angle = uniform(-max_angle, max_angle);
    let scale = uniform(ranges.scale_range[0], ranges.scale_range[1]);
    let m = ranges.max_translation;
    let translation = [uniform(-m, m), uniform(-m, m)];
    AugmentTransform::new(angle, scale, translation)
}

/// Augments a driving image `(3,S,S)` or `(B,3,S,S)` and returns the transform used.
pub fn augment_driving(image: &Tensor, rng: &mut impl Rng, ranges: &AugmentConfig) -> Result<(Tensor, AugmentTransform)> {
    ranges.validate()?;
    let t = sample_transform(rng, ranges)?;
    Ok((apply_augment(image, &t)?, t))
}

/// Per-step telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Unweighted loss terms, plus `total` and the discriminator loss `d_loss`.
    pub losses: BTreeMap<String, f64>,
    /// Mean absolute error between the generated and the driving image.
    pub reconstruction_l1: f64,
    /// Gradient L2 norm per network, discriminator included.
    pub grad_norms: BTreeMap<String, f64>,
    pub seconds: f64,
}

/// The main model with its optimizers and frozen loss networks.
pub struct TrainState {
    pub config: RunConfig,
    pub nets: FaceNets,
    pub disc: Discriminator,
    pub perceptual: SurrogatePerceptual,
    pub landmarks: SurrogateLandmarks,
    pub pose: Box<dyn PoseProvider>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

/// Training precision.
pub const TRAIN_DTYPE: DType = DType::F32;

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let dtype = TRAIN_DTYPE;
        let o = &config.optim;
        Ok(Self {
            nets: FaceNets::new(&config.net, config.seed, dtype)?,
            disc: Discriminator::new(&config.net, config.seed.wrapping_add(1), dtype)?,
            perceptual: SurrogatePerceptual::new(config.loss.perceptual_levels, PERCEPTUAL_SEED, dtype)?,
            landmarks: SurrogateLandmarks::new(&config.net, LANDMARK_SEED, dtype)?,
            pose: pose_provider(&config.pose_provider)?,
            opt_g: Adam::new(o.lr, o.beta1, o.beta2, o.eps),
            opt_d: Adam::new(o.discriminator_lr(), o.beta1, o.beta2, o.eps),
            step: 0,
            config: config.clone(),
        })
    }

    fn rotations(&self, images: &[&Tensor], meta: &[Option<&FrameMeta>]) -> Result<Tensor> {
        let rots = images
            .iter()
            .zip(meta)
            .map(|(img, m)| self.pose.rotation(img, *m))
            .collect::<Result<Vec<Rotation>>>()?;
        Ok(rotations_tensor(&rots, TRAIN_DTYPE, &Device::Cpu)?)
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &[FramePair], rng: &mut impl Rng) -> Result<StepMetrics> {
        let started = Instant::now();
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step + 1;
        let cfg = &self.config;
        let stack = |frames: Vec<&Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&frames, 0)?.to_dtype(TRAIN_DTYPE)?) };
        let source = stack(batch.iter().map(|p| &p.source.image).collect())?;
        let driving = stack(batch.iter().map(|p| &p.driving.image).collect())?;

        let mut transforms = Vec::with_capacity(batch.len());
        let mut augmented = Vec::with_capacity(batch.len());
        let mut aug_meta = Vec::with_capacity(batch.len());
        for pair in batch {
            let (img, t) = augment_driving(&pair.driving.image, rng, &cfg.augment)?;
            augmented.push(img);
            aug_meta.push(pair.driving.meta.as_ref().map(|m| m.transformed(&t)));
            transforms.push(t);
        }
        let driving_aug = stack(augmented.iter().collect())?;

        let s_meta: Vec<_> = batch.iter().map(|p| p.source.meta.as_ref()).collect();
        let d_meta: Vec<_> = batch.iter().map(|p| p.driving.meta.as_ref()).collect();
        let a_meta: Vec<_> = aug_meta.iter().map(|m| m.as_ref()).collect();
        let r_s = self.rotations(&batch.iter().map(|p| &p.source.image).collect::<Vec<_>>(), &s_meta)?;
        let r_d = self.rotations(&batch.iter().map(|p| &p.driving.image).collect::<Vec<_>>(), &d_meta)?;
        let r_a = self.rotations(&augmented.iter().collect::<Vec<_>>(), &a_meta)?;

        let nets = &self.nets;
        let est_s = nets.estimate(&source, &r_s)?;
        let est_d = nets.estimate(&driving, &r_d)?;
        let est_a = nets.estimate(&driving_aug, &r_a)?;

        let p_s = est_s.keypoints()?;
        let (p_d, delta_d) = nets.transfer_keypoints(&est_s.canonical, &est_d)?;
        let jac = nets.jacobians(&r_s, &r_d)?;
        let rendered = nets.render(&source, &p_s, &p_d, &jac)?;
        let generated = rendered.output.full().clone();

        let w = &cfg.loss.weights;
        let use_gan = w.gan != 0.0 || w.feature_matching != 0.0;
        let zero = || Tensor::zeros((), TRAIN_DTYPE, &Device::Cpu);
        let scales = &cfg.net.generator_scales;
        let truth = truth_pyramid(&driving, scales)?;
        let (gan, fm) = if use_gan {
            let fake = self.disc.net.forward(&generated)?;
            let real = self.disc.net.forward(&driving)?;
            let g = gan_losses(&real, &fake)?;
            (g.g_loss, g.feature_matching)
        } else {
            (zero()?, zero()?)
        };
        let own_d = est_d.keypoints()?;
        let own_a = est_a.keypoints()?;
        let terms = LossTerms {
            perceptual: Some(perceptual_multiscale(&rendered.output, &truth, &self.perceptual)?),
            gan: Some(gan),
            feature_matching: Some(fm),
            equivariance: Some(equivariance_loss(
                &project_orthographic_tensor(&own_d)?,
                &project_orthographic_tensor(&own_a)?,
                &transforms,
            )?),
            keypoint_prior: Some(keypoint_prior_loss(&p_d, &cfg.loss)?),
            deformation_prior: Some(deformation_prior_loss(&delta_d)?),
            expression: Some(expression_consistency_loss(&est_d.f_delta, &est_a.f_delta)?),
            canonical: Some(canonical_consistency_loss(&est_s.canonical, &est_d.canonical)?),
            landmark: Some(landmark_loss(
                &self.landmarks.forward(&generated)?,
                &self.landmarks.forward(&driving)?,
                &cfg.loss,
            )?),
        };
        let total = total_loss(&terms, &cfg.loss)?;

        let mut losses = BTreeMap::new();
        for (name, term) in terms.named() {
            let v = term.expect("every term set").to_dtype(DType::F64)?.to_scalar::<f64>()?;
            losses.insert(name.to_string(), v);
        }
        losses.insert("total".into(), total.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        if let Some((name, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
            let detail = format!("{name} = {v}; all terms: {losses:?}");
            return Err(Error::NonFiniteLoss { step, detail });
        }
        let reconstruction_l1 = (&generated - &driving)?.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;

        let grads = total.backward()?;
        let mut norms = grad_norms(nets.params(), &grads, &PARAM_GROUPS)?;
        self.opt_g.step(nets.params(), &grads)?;

        let mut d_loss_value = 0.0;
        if use_gan {
            let real = self.disc.net.forward(&driving)?;
            let fake = self.disc.net.forward(&generated.detach())?;
            let d_loss = lsgan_d_loss(&real.logits, &fake.logits)?;
            d_loss_value = d_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !d_loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step, detail: format!("d_loss = {d_loss_value}") });
            }
            let d_grads = d_loss.backward()?;
            norms.extend(grad_norms(self.disc.params(), &d_grads, &["discriminator"])?);
            self.opt_d.step(self.disc.params(), &d_grads)?;
        } else {
            norms.insert("discriminator".into(), 0.0);
        }
        losses.insert("d_loss".into(), d_loss_value);

        self.step = step;
        Ok(StepMetrics {
            step,
            losses,
            reconstruction_l1,
            grad_norms: norms,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Samples a batch from `dataset` with the per-step RNG and trains on it.
    pub fn train_on(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let mut rng = step_rng(self.config.seed, self.step + 1);
        let batch = sample_batch(dataset, self.config.batch_size, &mut rng)?;
        self.train_step(&batch, &mut rng)
    }

    /// [`TrainState::train_step`] on a fixed batch with the per-step RNG.
    pub fn train_fixed(&mut self, batch: &[FramePair]) -> Result<StepMetrics> {
        let mut rng = step_rng(self.config.seed, self.step + 1);
        self.train_step(batch, &mut rng)
    }

    /// Generated image for each pair, driving pose taken absolutely. `(B,3,S,S)`.
    pub fn reconstruct(&self, batch: &[FramePair]) -> Result<Tensor> {
        let stack = |frames: Vec<&Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&frames, 0)?.to_dtype(TRAIN_DTYPE)?) };
        let source = stack(batch.iter().map(|p| &p.source.image).collect())?;
        let driving = stack(batch.iter().map(|p| &p.driving.image).collect())?;
        let s_meta: Vec<_> = batch.iter().map(|p| p.source.meta.as_ref()).collect();
        let d_meta: Vec<_> = batch.iter().map(|p| p.driving.meta.as_ref()).collect();
        let r_s = self.rotations(&batch.iter().map(|p| &p.source.image).collect::<Vec<_>>(), &s_meta)?;
        let r_d = self.rotations(&batch.iter().map(|p| &p.driving.image).collect::<Vec<_>>(), &d_meta)?;
        let est_s = self.nets.estimate(&source, &r_s)?;
        let est_d = self.nets.estimate(&driving, &r_d)?;
        let p_s = est_s.keypoints()?;
        let (p_d, _) = self.nets.transfer_keypoints(&est_s.canonical, &est_d)?;
        let jac = self.nets.jacobians(&r_s, &r_d)?;
        Ok(self.nets.render(&source, &p_s, &p_d, &jac)?.output.full().detach())
    }
}
