//! Latent Gaussian VAE over expression features, with an adversarial term on
//! reconstructed features that counteracts posterior collapse.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::layers::{Init, Linear, ParamStore, Scope};
use crate::nets::ExpressionLatent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub expr_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub disc_hidden: usize,
    pub lambda_f: f64,
    pub lambda_kl: f64,
    pub lambda_adv: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            expr_dim: 256,
            latent_dim: 64,
            hidden: 128,
            disc_hidden: 64,
            lambda_f: 1.0,
            lambda_kl: 0.01,
            lambda_adv: 0.1,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expr_dim == 0 || self.latent_dim == 0 || self.hidden == 0 || self.disc_hidden == 0 {
            return Err(Error::Config("VAE dimensions must be positive".into()));
        }
        for (name, w) in [("lambda_f", self.lambda_f), ("lambda_kl", self.lambda_kl), ("lambda_adv", self.lambda_adv)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("VAE lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Posterior `𝒩(μ, diag σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Shape(format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) || mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sigma must be positive and all entries finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    z: Vec<f64>,
}

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent code must be finite".into()));
        }
        Ok(Self { z })
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(g: &GaussianParams, epsilon: &[f64]) -> Result<LatentCode> {
    if epsilon.len() != g.dim() {
        return Err(Error::Shape(format!("epsilon has {} entries for a {}-dim posterior", epsilon.len(), g.dim())));
    }
    LatentCode::new(g.mu.iter().zip(&g.sigma).zip(epsilon).map(|((m, s), e)| m + s * e).collect())
}

/// Tensor form of [`reparameterize`] with `σ = exp(log_sigma)`.
pub fn reparameterize_tensor(mu: &Tensor, log_sigma: &Tensor, epsilon: &Tensor) -> Result<Tensor> {
    Ok((mu + log_sigma.exp()?.mul(epsilon)?)?)
}

/// `½ Σᵢ (μᵢ² + σᵢ² − 1 − ln σᵢ²)`.
pub fn kl_to_standard_normal(g: &GaussianParams) -> f64 {
    0.5 * g.mu.iter().zip(&g.sigma).map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln()).sum::<f64>()
}

/// Batch mean of the per-row KL for `(B,Z)` parameters.
pub fn kl_tensor(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let b = mu.dim(0)?;
    let per = ((mu.sqr()? + (log_sigma * 2.0)?.exp()?)? - 1.0)?.sub(&(log_sigma * 2.0)?)?;
    Ok(((per.sum_all()? * 0.5)? / b as f64)?)
}

/// `z(α) = z_S + α (z_D − z_S)`.
pub fn interpolate(z_s: &LatentCode, z_d: &LatentCode, alpha: f64) -> Result<LatentCode> {
    if z_s.dim() != z_d.dim() {
        return Err(Error::Shape(format!("latent sizes {} and {}", z_s.dim(), z_d.dim())));
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument("alpha must be finite".into()));
    }
    if alpha == 0.0 {
        return Ok(z_s.clone());
    }
    if alpha == 1.0 {
        return Ok(z_d.clone());
    }
    LatentCode::new(z_s.z.iter().zip(&z_d.z).map(|(a, b)| a + alpha * (b - a)).collect())
}

/// Smallest μ-variance counted as an active latent unit.
pub const ACTIVE_UNIT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Per-dimension mean of σ over the batch.
    pub mean_sigma: Vec<f64>,
    /// Per-dimension variance of μ over the batch.
    pub mu_variance: Vec<f64>,
    pub active_units: usize,
    pub collapsed: bool,
}

impl CollapseReport {
    pub fn active_units_at(&self, threshold: f64) -> usize {
        self.mu_variance.iter().filter(|v| **v > threshold).count()
    }
}

pub fn collapse_diagnostics(batch: &[GaussianParams]) -> Result<CollapseReport> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("collapse diagnostics need at least two posteriors".into()));
    }
    let d = batch[0].dim();
    if batch.iter().any(|g| g.dim() != d) {
        return Err(Error::Shape("posteriors differ in dimension".into()));
    }
    let n = batch.len() as f64;
    let mut mean_sigma = vec![0.0; d];
    let mut mean_mu = vec![0.0; d];
    for g in batch {
        for i in 0..d {
            mean_sigma[i] += g.sigma[i] / n;
            mean_mu[i] += g.mu[i] / n;
        }
    }
    let mut mu_variance = vec![0.0; d];
    for g in batch {
        for i in 0..d {
            mu_variance[i] += (g.mu[i] - mean_mu[i]).powi(2) / n;
        }
    }
    let active_units = mu_variance.iter().filter(|v| **v > ACTIVE_UNIT_THRESHOLD).count();
    Ok(CollapseReport { mean_sigma, mu_variance, active_units, collapsed: active_units == 0 })
}

struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(s: &mut Scope, sizes: &[usize], last_gain: f64) -> Result<Self> {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { last_gain } else { 1.0 };
                s.linear_init(&format!("fc{i}"), sizes[i], sizes[i + 1], Init::Kaiming(gain))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Output and the hidden activations.
    fn forward_with_hidden(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut hidden = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
                hidden.push(h.clone());
            }
        }
        Ok((h, hidden))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_hidden(x)?.0)
    }
}

/// Encoder `f_δ → (μ, log σ)` and decoder `z → f̂_δ`.
pub struct ExpressionVae {
    encoder: Mlp,
    decoder: Mlp,
    config: VaeConfig,
    params: BTreeMap<String, Var>,
    dtype: DType,
}

impl ExpressionVae {
    pub fn new(config: &VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let (e, h, z) = (config.expr_dim, config.hidden, config.latent_dim);
        let encoder = Mlp::new(&mut store.scope("vae.encoder"), &[e, h, h, 2 * z], 0.1)?;
        let decoder = Mlp::new(&mut store.scope("vae.decoder"), &[z, h, h, e], 1.0)?;
        Ok(Self { encoder, decoder, config: config.clone(), params: store.into_vars(), dtype })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// `(B,E)` → `(μ, log σ)`, each `(B,Z)`.
    pub fn encode(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, e) = f.dims2()?;
        if e != self.config.expr_dim {
            return Err(Error::Shape(format!("expected {}-dim expression features, got {e}", self.config.expr_dim)));
        }
        let out = self.encoder.forward(f)?;
        let z = self.config.latent_dim;
        Ok((out.narrow(1, 0, z)?, out.narrow(1, z, z)?))
    }

    /// `(B,Z)` → `(B,E)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        if d != self.config.latent_dim {
            return Err(Error::Shape(format!("expected {}-dim latents, got {d}", self.config.latent_dim)));
        }
        self.decoder.forward(z)
    }

    pub fn encode_latent(&self, f: &ExpressionLatent) -> Result<GaussianParams> {
        let (mu, log_sigma) = self.encode(&f.to_tensor(self.dtype)?)?;
        let mu = mu.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let sigma = log_sigma.exp()?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        GaussianParams::new(mu, sigma)
    }

    pub fn decode_latent(&self, z: &LatentCode) -> Result<ExpressionLatent> {
        let t = Tensor::from_vec(z.z.clone(), (1, z.dim()), &Device::Cpu)?.to_dtype(self.dtype)?;
        ExpressionLatent::from_tensor_row(&self.decode(&t)?, 0)
    }
}

/// Three-layer fully connected discriminator on expression features.
pub struct FeatureDiscriminator {
    net: Mlp,
    params: BTreeMap<String, Var>,
}

impl FeatureDiscriminator {
    pub fn new(config: &VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let h = config.disc_hidden;
        let net = Mlp::new(&mut store.scope("vae.disc"), &[config.expr_dim, h, h, 1], 1.0)?;
        Ok(Self { net, params: store.into_vars() })
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Logits `(B,1)` and the two hidden activations.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.net.forward_with_hidden(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeWeights {
    pub lambda_f: f64,
    pub lambda_kl: f64,
    pub lambda_adv: f64,
}

impl From<&VaeConfig> for VaeWeights {
    fn from(c: &VaeConfig) -> Self {
        Self { lambda_f: c.lambda_f, lambda_kl: c.lambda_kl, lambda_adv: c.lambda_adv }
    }
}

#[derive(Clone, Debug)]
pub struct VaeLossParts {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub adversarial: Tensor,
}

/// Adversarial term on reconstructed features: least-squares generator loss
/// plus the squared distance between discriminator activations of the real
/// and reconstructed feature, summed over units and averaged over the batch.
pub fn adversarial_feature_loss(disc: &FeatureDiscriminator, f_delta: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    let b = f_delta.dim(0)?;
    let (fake_logits, fake_hidden) = disc.forward(f_hat)?;
    let (_, real_hidden) = disc.forward(&f_delta.detach())?;
    let mut loss = (fake_logits - 1.0)?.sqr()?.mean_all()?;
    for (fake, real) in fake_hidden.iter().zip(&real_hidden) {
        loss = (loss + (fake - real.detach())?.sqr()?.sum_all()?.affine(1.0 / b as f64, 0.0)?)?;
    }
    Ok(loss)
}

/// `λ_f · MSE(f_δ, f̂_δ) + λ_kl · KL + λ_adv · 𝓛_Adv`.
pub fn vae_loss(
    f_delta: &Tensor,
    f_hat: &Tensor,
    mu: &Tensor,
    log_sigma: &Tensor,
    disc: Option<&FeatureDiscriminator>,
    w: VaeWeights,
) -> Result<VaeLossParts> {
    if f_delta.dims() != f_hat.dims() {
        return Err(Error::Shape(format!("features {:?} vs reconstruction {:?}", f_delta.shape(), f_hat.shape())));
    }
    let reconstruction = (f_delta - f_hat)?.sqr()?.mean_all()?;
    let kl = kl_tensor(mu, log_sigma)?;
    let adversarial = if w.lambda_adv > 0.0 {
        let disc = disc.ok_or_else(|| Error::MissingComponent("feature discriminator (lambda_adv > 0)".into()))?;
        adversarial_feature_loss(disc, f_delta, f_hat)?
    } else {
        reconstruction.zeros_like()?
    };
    let total = (((&reconstruction * w.lambda_f)? + (&kl * w.lambda_kl)?)? + (&adversarial * w.lambda_adv)?)?;
    Ok(VaeLossParts { total, reconstruction, kl, adversarial })
}

/// Least-squares discriminator loss on real features and detached reconstructions.
pub fn feature_disc_loss(disc: &FeatureDiscriminator, f_delta: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    let (real, _) = disc.forward(&f_delta.detach())?;
    let (fake, _) = disc.forward(&f_hat.detach())?;
    crate::losses::lsgan_d_loss(&real, &fake)
}

/// Features drawn from an equal-weight Gaussian mixture: mode centres are
/// `𝒩(0, between·I)`, samples add `𝒩(0, within·I)`. Returns `(N,dim)` and the
/// mode of each row.
pub fn mixture_features(
    n: usize,
    dim: usize,
    modes: usize,
    between: f64,
    within: f64,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let centres: Vec<Vec<f64>> = (0..modes).map(|_| (0..dim).map(|_| between.sqrt() * normal()).collect()).collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let m = i % modes;
        labels.push(m);
        data.extend(centres[m].iter().map(|c| c + within.sqrt() * normal()));
    }
    Ok((Tensor::from_vec(data, (n, dim), &Device::Cpu)?, labels))
}
