//! Conditional latent diffusion: noise schedule with SNR shift, forward
//! corruption, DDPM/DDIM reverse steps, classifier-free guidance, a hashed
//! caption embedding and a small convolutional U-Net denoiser.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 = 1`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use trigen_core::io::{load_bundle, save_bundle};
use trigen_core::nn::{Bound, Conv2d, Linear, ParamStore};
use trigen_core::{rng, Adam, AdamConfig, NumError, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
pub const CFG_DROPOUT: f32 = 0.10;
pub const GUIDANCE: f32 = 7.5;
pub const DDIM_STEPS: usize = 200;
pub const EMBED_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub shift: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    linear_alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end`, then `ᾱ` remapped so that
    /// `SNR(t) = SNR_linear(t) / s²`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, shift: f64) -> Result<Self> {
        let betas_ok = 0.0 < beta_start && beta_start < beta_end && beta_end < 1.0;
        if steps < 2 || !betas_ok || shift.is_nan() || shift <= 0.0 {
            return Err(Error::Config(format!(
                "invalid schedule: T={steps}, β ∈ [{beta_start}, {beta_end}], s={shift}"
            )));
        }
        let mut linear_alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - beta;
            linear_alpha_bars.push(acc);
        }
        let alpha_bars: Vec<f64> = if shift == 1.0 {
            linear_alpha_bars.clone()
        } else {
            linear_alpha_bars
                .iter()
                .map(|&ab| {
                    let snr = ab / (1.0 - ab) / (shift * shift);
                    snr / (1.0 + snr)
                })
                .collect()
        };
        let mut betas = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut posterior_var = Vec::with_capacity(steps);
        let mut prev = 1.0f64;
        for &ab in &alpha_bars {
            let alpha = ab / prev;
            let beta = 1.0 - alpha;
            betas.push(beta);
            alphas.push(alpha);
            posterior_var.push((1.0 - prev) / (1.0 - ab) * beta);
            prev = ab;
        }
        Ok(Self {
            shift,
            betas,
            alphas,
            alpha_bars,
            linear_alpha_bars,
            posterior_var,
        })
    }

    pub fn default_linear() -> Self {
        Self::new(DEFAULT_STEPS, BETA_START, BETA_END, 1.0).expect("valid defaults")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    /// SNR of the unshifted linear schedule.
    pub fn linear_snr(&self, t: usize) -> f64 {
        let ab = self.linear_alpha_bars[t - 1];
        ab / (1.0 - ab)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Num(NumError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// `√ᾱ_t f0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(f0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape("q_sample", f0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(combine(f0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Reverse-process mean `(f_t − β_t/√(1 − ᾱ_t) ε̂) / √α_t`.
pub fn ddpm_mean(f_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape("ddpm_mean", f_t, eps_hat)?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(combine(f_t, inv, eps_hat, -k * inv))
}

/// One ancestral step: the mean plus `σ_t · noise`, with no noise at `t = 1`.
pub fn ddpm_step(f_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let mean = ddpm_mean(f_t, t, eps_hat, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    same_shape("ddpm_step", f_t, noise)?;
    Ok(combine(&mean, 1.0, noise, sched.posterior_variance(t).sqrt()))
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(x_t: &Tensor, t: usize, t_prev: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape("ddim_step", x_t, eps_hat)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    // x_prev = √ᾱ_prev · x̂0 + √(1 − ᾱ_prev) · ε̂ with x̂0 = (x_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t
    let c_x = (ab_prev / ab).sqrt();
    let c_e = (1.0 - ab_prev).sqrt() - (ab_prev * (1.0 - ab) / ab).sqrt();
    Ok(combine(x_t, c_x, eps_hat, c_e))
}

/// `n` evenly spaced timesteps from `T` down to 1.
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(format!("DDIM needs 1 ≤ n_steps ≤ {total}, got {n}")));
    }
    if n == 1 {
        return Ok(vec![total]);
    }
    let mut ts: Vec<usize> = (0..n)
        .map(|i| 1 + ((total - 1) as f64 * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// `ε_uncond + g (ε_cond − ε_uncond)`; exact pass-through at `g = 1` and `g = 0`.
pub fn cfg_epsilon(eps_cond: &Tensor, eps_uncond: &Tensor, guidance: f32) -> Result<Tensor> {
    same_shape("cfg_epsilon", eps_cond, eps_uncond)?;
    if guidance == 1.0 {
        return Ok(eps_cond.clone());
    }
    if guidance == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + guidance * (c - u))?)
}

/// Caption embedding; the null condition is the zero vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningEmbedding {
    pub vector: Vec<f32>,
    pub null: bool,
}

impl ConditioningEmbedding {
    pub fn null() -> Self {
        Self {
            vector: vec![0.0; EMBED_DIM],
            null: true,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.vector.len()], self.vector.clone()).expect("consistent size")
    }

    pub fn cosine(&self, other: &Self) -> f32 {
        let dot: f32 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na: f32 = self.vector.iter().map(|a| a * a).sum::<f32>().sqrt();
        let nb: f32 = other.vector.iter().map(|a| a * a).sum::<f32>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag of hashed lowercase tokens with hashed signs, L2-normalized to width
/// [`EMBED_DIM`]. Text without tokens maps to the null embedding.
pub fn embed_caption(text: &str) -> ConditioningEmbedding {
    let mut v = vec![0.0f32; EMBED_DIM];
    let mut any = false;
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
    {
        let h = fnv1a(token.as_bytes());
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[(h % EMBED_DIM as u64) as usize] += sign;
        any = true;
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if !any || norm == 0.0 {
        return ConditioningEmbedding::null();
    }
    v.iter_mut().for_each(|x| *x /= norm);
    ConditioningEmbedding { vector: v, null: false }
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &ConditioningEmbedding) -> Result<Tensor>;
}

/// Exact `E[ε | x_t]` when the data are `N(mean, σ_d² I)`:
/// `√(1 − ᾱ)(x_t − √ᾱ m) / (ᾱ σ_d² + 1 − ᾱ)`. Ignores the condition.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianScore {
    pub mean: Tensor,
    pub sigma_data: f32,
    pub schedule: NoiseSchedule,
}

impl AnalyticGaussianScore {
    pub fn new(mean: Tensor, sigma_data: f32, schedule: NoiseSchedule) -> Self {
        Self {
            mean,
            sigma_data,
            schedule,
        }
    }
}

impl NoisePredictor for AnalyticGaussianScore {
    fn predict_noise(&self, x_t: &Tensor, t: usize, _cond: &ConditioningEmbedding) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        same_shape("analytic score", x_t, &self.mean)?;
        let ab = self.schedule.alpha_bar(t);
        let sd2 = (self.sigma_data as f64).powi(2);
        let denom = ab * sd2 + 1.0 - ab;
        let k = (1.0 - ab).sqrt() / denom;
        Ok(combine(x_t, k, &self.mean, -k * ab.sqrt()))
    }
}

fn guided_eps(
    model: &impl NoisePredictor,
    x: &Tensor,
    t: usize,
    e: &ConditioningEmbedding,
    null: &ConditioningEmbedding,
    guidance: f32,
) -> Result<Tensor> {
    let cond = model.predict_noise(x, t, e)?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict_noise(x, t, null)?;
    cfg_epsilon(&cond, &uncond, guidance)
}

/// DDIM (η = 0) over `n_steps` evenly spaced timesteps starting from seeded
/// Gaussian noise of `shape`. Returns a normalized latent.
pub fn ddim_sample(
    model: &impl NoisePredictor,
    e: &ConditioningEmbedding,
    sched: &NoiseSchedule,
    n_steps: usize,
    guidance: f32,
    seed: u64,
    shape: &[usize],
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.steps(), n_steps)?;
    let mut r = rng::seeded(seed);
    let mut x = Tensor::randn(shape, &mut r);
    let null = ConditioningEmbedding::null();
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_eps(model, &x, t, e, &null, guidance)?;
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        x = ddim_step(&x, t, t_prev, &eps, sched)?;
    }
    Ok(x)
}

/// Full ancestral DDPM chain from `T` to 1.
pub fn ddpm_sample(
    model: &impl NoisePredictor,
    e: &ConditioningEmbedding,
    sched: &NoiseSchedule,
    guidance: f32,
    seed: u64,
    shape: &[usize],
) -> Result<Tensor> {
    let mut r = rng::seeded(seed);
    let mut x = Tensor::randn(shape, &mut r);
    let null = ConditioningEmbedding::null();
    for t in (1..=sched.steps()).rev() {
        let eps = guided_eps(model, &x, t, e, &null, guidance)?;
        let noise = Tensor::randn(shape, &mut r);
        x = ddpm_step(&x, t, &eps, sched, &noise)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            base_channels: 32,
            time_dim: 64,
            embed_dim: EMBED_DIM,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    emb: Linear,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, emb_dim: usize, r: &mut rng::Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, r),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, r),
            emb: Linear::new(store, &format!("{name}.emb"), emb_dim, ch, r),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, emb: Var) -> Result<Var> {
        let h = tape.silu(x)?;
        let h = self.conv1.forward(tape, p, h)?;
        let e = self.emb.forward(tape, p, emb)?;
        let c = tape.shape(e)[1];
        let e = tape.reshape(e, &[c])?;
        let h = tape.add_along(h, e, 0)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Two-level convolutional U-Net with additive time + caption embedding.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    conv_in: Conv2d,
    block_hi: ResBlock,
    down: Conv2d,
    block_lo: ResBlock,
    mid: ResBlock,
    up: Conv2d,
    merge: Conv2d,
    block_out: ResBlock,
    conv_out: Conv2d,
}

pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        v[i] = a.sin() as f32;
        v[half + i] = a.cos() as f32;
    }
    Tensor::new(&[1, dim], v).expect("consistent size")
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Self {
        let mut r = rng::derive(seed, 41);
        let mut s = ParamStore::new();
        let (c, l) = (cfg.base_channels, cfg.latent_channels);
        let e = 2 * c;
        let time1 = Linear::new(&mut s, "time1", cfg.time_dim, e, &mut r);
        let time2 = Linear::new(&mut s, "time2", e, e, &mut r);
        let cond = Linear::new(&mut s, "cond", cfg.embed_dim, e, &mut r);
        let conv_in = Conv2d::new(&mut s, "conv_in", l, c, 3, 1, 1, &mut r);
        let block_hi = ResBlock::new(&mut s, "block_hi", c, e, &mut r);
        let down = Conv2d::new(&mut s, "down", c, 2 * c, 3, 2, 1, &mut r);
        let block_lo = ResBlock::new(&mut s, "block_lo", 2 * c, e, &mut r);
        let mid = ResBlock::new(&mut s, "mid", 2 * c, e, &mut r);
        let up = Conv2d::new(&mut s, "up", 2 * c, c, 3, 1, 1, &mut r);
        let merge = Conv2d::new(&mut s, "merge", 2 * c, c, 3, 1, 1, &mut r);
        let block_out = ResBlock::new(&mut s, "block_out", c, e, &mut r);
        let conv_out = Conv2d::new(&mut s, "conv_out", c, l, 3, 1, 1, &mut r);
        // A zero head makes the untrained prediction exactly zero.
        s.get_mut(conv_out.weight).data_mut().fill(0.0);
        Self {
            cfg,
            store: s,
            time1,
            time2,
            cond,
            conv_in,
            block_hi,
            down,
            block_lo,
            mid,
            up,
            merge,
            block_out,
            conv_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, t: usize, cond: &ConditioningEmbedding) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.cfg.latent_channels || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "denoiser expects {}×H×W with even H, W, got {s:?}",
                self.cfg.latent_channels
            )));
        }
        if cond.vector.len() != self.cfg.embed_dim {
            return Err(Error::Config(format!(
                "embedding width {} ≠ {}",
                cond.vector.len(),
                self.cfg.embed_dim
            )));
        }
        let te = tape.constant(timestep_embedding(t, self.cfg.time_dim));
        let te = self.time1.forward(tape, p, te)?;
        let te = tape.silu(te)?;
        let te = self.time2.forward(tape, p, te)?;
        let ce = tape.constant(cond.to_tensor());
        let ce = self.cond.forward(tape, p, ce)?;
        let emb = tape.add(te, ce)?;
        let emb = tape.silu(emb)?;

        let h = self.conv_in.forward(tape, p, x)?;
        let skip = self.block_hi.forward(tape, p, h, emb)?;
        let h = self.down.forward(tape, p, skip)?;
        let h = self.block_lo.forward(tape, p, h, emb)?;
        let h = self.mid.forward(tape, p, h, emb)?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.up.forward(tape, p, h)?;
        let h = tape.concat(&[h, skip], 0)?;
        let h = self.merge.forward(tape, p, h)?;
        let h = self.block_out.forward(tape, p, h, emb)?;
        let h = tape.silu(h)?;
        Ok(self.conv_out.forward(tape, p, h)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_bundle(path, self.store.named(), serde_json::json!({ "config": self.cfg }))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (entries, meta) = load_bundle(path)?;
        let cfg: DenoiserConfig = serde_json::from_value(meta["config"].clone())?;
        let mut d = Self::new(cfg, 0);
        d.store.load_named(entries)?;
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &ConditioningEmbedding) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, &p, x, t, cond)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmConfig {
    pub denoiser: DenoiserConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub cfg_dropout: f32,
    pub seed: u64,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            cfg_dropout: CFG_DROPOUT,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LdmTraining {
    pub denoiser: Denoiser,
    pub losses: Vec<f32>,
}

/// Minimizes `E‖ε − ε_θ(f_t, t, e)‖²` over normalized latents, replacing the
/// caption embedding by the null embedding with probability `cfg_dropout`.
pub fn train_ldm(latents: &[Tensor], captions: &[String], sched: &NoiseSchedule, cfg: &LdmConfig) -> Result<LdmTraining> {
    train_ldm_from(Denoiser::new(cfg.denoiser.clone(), cfg.seed), latents, captions, sched, cfg)
}

/// Continues training an existing denoiser with the same configuration.
pub fn train_ldm_from(
    mut denoiser: Denoiser,
    latents: &[Tensor],
    captions: &[String],
    sched: &NoiseSchedule,
    cfg: &LdmConfig,
) -> Result<LdmTraining> {
    if latents.is_empty() || latents.len() != captions.len() {
        return Err(Error::Config(format!(
            "{} latents but {} captions",
            latents.len(),
            captions.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.cfg_dropout) {
        return Err(Error::Config(format!("dropout {} outside [0, 1]", cfg.cfg_dropout)));
    }
    let embeddings: Vec<ConditioningEmbedding> = captions.iter().map(|c| embed_caption(c)).collect();
    let null = ConditioningEmbedding::null();
    let mut r = rng::derive(cfg.seed, 43);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let batch = cfg.batch_size.max(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let p = denoiser.store.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let i = r.random_range(0..latents.len());
            let t = r.random_range(1..=sched.steps());
            let eps = Tensor::randn(latents[i].shape(), &mut r);
            let x_t = q_sample(&latents[i], t, &eps, sched)?;
            let cond = if r.random::<f32>() < cfg.cfg_dropout {
                &null
            } else {
                &embeddings[i]
            };
            let x = tape.constant(x_t);
            let pred = denoiser.forward(&mut tape, &p, x, t, cond)?;
            let target = tape.constant(eps);
            let loss = tape.mse(pred, target)?;
            total = Some(match total {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let total = tape.div(total.expect("non-empty batch"), batch as f32)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {value}"),
            });
        }
        losses.push(value);
        let grads = tape.backward(total)?;
        denoiser.store.apply(&mut opt, &p, &grads).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        if step % 200 == 0 {
            log::debug!("ldm step {step}: loss {value:.5}");
        }
    }
    Ok(LdmTraining { denoiser, losses })
}
