use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::optim::{grad_norms, Adam};
use super::train::step_rng;
use super::Dataset;
use crate::error::{Error, Result};
use crate::expr_vae::{
    collapse_diagnostics, feature_disc_loss, reparameterize_tensor, vae_loss, CollapseReport, ExpressionVae,
    FeatureDiscriminator, GaussianParams, VaeConfig, VaeWeights,
};
use crate::nets::FaceNets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeStepMetrics {
    pub step: u64,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub adversarial: f64,
    pub d_loss: f64,
    /// `encoder`, `decoder` and, when trained, `disc`.
    pub grad_norms: BTreeMap<String, f64>,
    pub seconds: f64,
}

/// The expression VAE, its feature discriminator and their optimizers.
pub struct VaeState {
    pub config: VaeConfig,
    pub vae: ExpressionVae,
    pub disc: FeatureDiscriminator,
    pub opt: Adam,
    pub opt_d: Adam,
    pub step: u64,
    seed: u64,
}

impl VaeState {
    pub fn new(config: &VaeConfig, seed: u64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            vae: ExpressionVae::new(config, seed, DType::F32)?,
            disc: FeatureDiscriminator::new(config, seed.wrapping_add(1), DType::F32)?,
            opt: Adam::new(config.lr, beta1, beta2, eps),
            opt_d: Adam::new(config.lr, beta1, beta2, eps),
            step: 0,
            seed,
            config: config.clone(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One VAE update on `features (B,E)`, then one discriminator update when `λ_adv > 0`.
    pub fn train_vae_step(&mut self, features: &Tensor, rng: &mut impl Rng) -> Result<VaeStepMetrics> {
        let started = Instant::now();
        let step = self.step + 1;
        let f = features.to_dtype(DType::F32)?.detach();
        let (b, _) = f.dims2()?;
        let (mu, log_sigma) = self.vae.encode(&f)?;
        let z_dim = self.config.latent_dim;
        let eps: Vec<f32> = (0..b * z_dim).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(eps, (b, z_dim), &Device::Cpu)?;
        let f_hat = self.vae.decode(&reparameterize_tensor(&mu, &log_sigma, &eps)?)?;
        let w = VaeWeights::from(&self.config);
        let parts = vae_loss(&f, &f_hat, &mu, &log_sigma, Some(&self.disc), w)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let (total, reconstruction, kl, adversarial) =
            (scalar(&parts.total)?, scalar(&parts.reconstruction)?, scalar(&parts.kl)?, scalar(&parts.adversarial)?);
        if ![total, reconstruction, kl, adversarial].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total {total}, reconstruction {reconstruction}, kl {kl}, adversarial {adversarial}"),
            });
        }
        let grads = parts.total.backward()?;
        let mut norms = grad_norms(self.vae.params(), &grads, &["vae.encoder", "vae.decoder"])?;
        self.opt.step(self.vae.params(), &grads)?;

        let mut d_loss = 0.0;
        if w.lambda_adv > 0.0 {
            let loss = feature_disc_loss(&self.disc, &f, &f_hat)?;
            d_loss = scalar(&loss)?;
            let grads = loss.backward()?;
            norms.extend(grad_norms(self.disc.params(), &grads, &["vae.disc"])?);
            self.opt_d.step(self.disc.params(), &grads)?;
        }
        self.step = step;
        let norms = norms.into_iter().map(|(k, v)| (k.trim_start_matches("vae.").to_string(), v)).collect();
        Ok(VaeStepMetrics {
            step,
            total,
            reconstruction,
            kl,
            adversarial,
            d_loss,
            grad_norms: norms,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Draws a batch of rows from `features (N,E)` with the per-step RNG and trains on it.
    pub fn train_on(&mut self, features: &Tensor) -> Result<VaeStepMetrics> {
        let mut rng = step_rng(self.seed, self.step + 1);
        let n = features.dim(0)?;
        if n == 0 {
            return Err(Error::Dataset("no expression features".into()));
        }
        let idx: Vec<u32> = (0..self.config.batch_size.min(n)).map(|_| rng.random_range(0..n as u32)).collect();
        let idx = Tensor::from_vec(idx, self.config.batch_size.min(n), &Device::Cpu)?;
        let batch = features.index_select(&idx, 0)?;
        self.train_vae_step(&batch, &mut rng)
    }

    /// Posterior means and spreads of `features (N,E)` and the collapse report.
    pub fn diagnose(&self, features: &Tensor) -> Result<(Vec<GaussianParams>, CollapseReport)> {
        let (mu, log_sigma) = self.vae.encode(&features.to_dtype(DType::F32)?)?;
        let mu = mu.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let sigma = log_sigma.exp()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let posts = mu.into_iter().zip(sigma).map(|(m, s)| GaussianParams::new(m, s)).collect::<Result<Vec<_>>>()?;
        let report = collapse_diagnostics(&posts)?;
        Ok((posts, report))
    }

    /// Mean squared reconstruction error through the posterior mean (`ε = 0`).
    pub fn reconstruction_mse(&self, features: &Tensor) -> Result<f64> {
        let f = features.to_dtype(DType::F32)?;
        let (mu, _) = self.vae.encode(&f)?;
        let f_hat = self.vae.decode(&mu)?;
        Ok((f - f_hat)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Expression features `f_δ` of every frame in `dataset`, `(N,E)`, computed in
/// chunks without gradients.
pub fn expression_features(nets: &FaceNets, dataset: &Dataset) -> Result<Tensor> {
    let frames: Vec<&Tensor> = dataset.iter().flat_map(|s| s.frames.iter().map(|f| &f.image)).collect();
    if frames.is_empty() {
        return Err(Error::Dataset("dataset has no frames".into()));
    }
    let mut rows = Vec::new();
    for chunk in frames.chunks(16) {
        let images = Tensor::stack(chunk, 0)?.to_dtype(nets.dtype())?;
        rows.push(nets.expr_encoder.forward(&images)?.detach());
    }
    Ok(Tensor::cat(&rows, 0)?)
}
