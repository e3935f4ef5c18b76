//! Tri-plane VAE over rolled-out planes.
//!
//! The three `C×W×H` planes are concatenated along H into one `C×W×3H` map
//! so ordinary 2D convolutions see all of them. The encoder halves the
//! spatial size once per stage and predicts a diagonal Gaussian posterior;
//! the decoder mirrors it with nearest-neighbour upsampling.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use trigen_core::io::{load_bundle, save_bundle};
use trigen_core::nn::{Bound, Conv2d, ParamStore};
use trigen_core::{rng, Adam, AdamConfig, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::triplane::{plane_tv_var, TriPlane};

pub const KL_WEIGHT: f32 = 1e-5;
pub const TV_WEIGHT: f32 = 2e-3;
pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;
pub const STD_FLOOR: f64 = 1e-6;

/// Three planes side by side: `C×W×3H`, in xy, yz, xz order.
#[derive(Clone, Debug, PartialEq)]
pub struct RolledPlane {
    pub tensor: Tensor,
    pub color_channels: usize,
}

pub fn rollout(tp: &TriPlane) -> RolledPlane {
    let (c, w, h) = (tp.channels(), tp.width(), tp.height());
    let mut out = vec![0.0f32; c * w * 3 * h];
    for (p, plane) in tp.planes().iter().enumerate() {
        let d = plane.data();
        for row in 0..c * w {
            let dst = row * 3 * h + p * h;
            out[dst..dst + h].copy_from_slice(&d[row * h..(row + 1) * h]);
        }
    }
    RolledPlane {
        tensor: Tensor::new(&[c, w, 3 * h], out).expect("consistent size"),
        color_channels: tp.color_channels(),
    }
}

pub fn unroll(rp: &RolledPlane) -> Result<TriPlane> {
    let s = rp.tensor.shape();
    if s.len() != 3 || !s[2].is_multiple_of(3) {
        return Err(Error::Config(format!("rolled plane shape {s:?} is not C×W×3H")));
    }
    let (c, w, h) = (s[0], s[1], s[2] / 3);
    let d = rp.tensor.data();
    let planes = [0, 1, 2].map(|p| {
        let mut out = vec![0.0f32; c * w * h];
        for row in 0..c * w {
            let src = row * 3 * h + p * h;
            out[row * h..(row + 1) * h].copy_from_slice(&d[src..src + h]);
        }
        Tensor::new(&[c, w, h], out).expect("consistent size")
    });
    TriPlane::from_planes(planes, rp.color_channels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub color_channels: usize,
    pub base_channels: usize,
    /// Width multiplier of each downsampling stage.
    pub channel_mults: Vec<usize>,
    pub latent_channels: usize,
    pub kl_weight: f32,
    pub tv_weight: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            color_channels: 8,
            base_channels: 32,
            channel_mults: vec![1, 2],
            latent_channels: 8,
            kl_weight: KL_WEIGHT,
            tv_weight: TV_WEIGHT,
            lr: 1e-3,
            steps: 2000,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.channel_mults.len()
    }

    /// Latent shape for a rolled input of spatial size `w × 3h`.
    pub fn latent_shape(&self, w: usize, rolled_h: usize) -> [usize; 3] {
        let f = self.downsample_factor();
        [self.latent_channels, w / f, rolled_h / f]
    }
}

/// Encoder posterior and the latent drawn from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneLatent {
    pub z: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone, Debug)]
pub struct TriplaneVae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

fn res_block(tape: &mut Tape, p: &Bound, conv: &Conv2d, h: Var) -> Result<Var> {
    let a = tape.silu(h)?;
    let a = conv.forward(tape, p, a)?;
    Ok(tape.add(h, a)?)
}

impl TriplaneVae {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        if cfg.channel_mults.is_empty() || cfg.latent_channels == 0 || cfg.base_channels == 0 {
            return Err(Error::Config("VAE needs at least one stage and non-zero widths".into()));
        }
        let mut r = rng::derive(cfg.seed, 31);
        let mut store = ParamStore::new();
        let widths: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let base = cfg.base_channels;
        let enc_in = Conv2d::new(&mut store, "enc.in", cfg.in_channels, base, 3, 1, 1, &mut r);
        let mut enc_down = Vec::new();
        let mut prev = base;
        for (i, &w) in widths.iter().enumerate() {
            let down = Conv2d::new(&mut store, &format!("enc.down{i}"), prev, w, 3, 2, 1, &mut r);
            let block = Conv2d::new(&mut store, &format!("enc.block{i}"), w, w, 3, 1, 1, &mut r);
            enc_down.push((down, block));
            prev = w;
        }
        let enc_out = Conv2d::new(&mut store, "enc.out", prev, 2 * cfg.latent_channels, 3, 1, 1, &mut r);
        let dec_in = Conv2d::new(&mut store, "dec.in", cfg.latent_channels, prev, 3, 1, 1, &mut r);
        let mut dec_up = Vec::new();
        for i in (0..widths.len()).rev() {
            let w = widths[i];
            let next = if i == 0 { base } else { widths[i - 1] };
            let block = Conv2d::new(&mut store, &format!("dec.block{i}"), w, w, 3, 1, 1, &mut r);
            let up = Conv2d::new(&mut store, &format!("dec.up{i}"), w, next, 3, 1, 1, &mut r);
            dec_up.push((block, up));
        }
        let dec_out = Conv2d::new(&mut store, "dec.out", base, cfg.in_channels, 3, 1, 1, &mut r);
        Ok(Self {
            cfg,
            store,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.cfg.downsample_factor();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || !shape[1].is_multiple_of(f) || !shape[2].is_multiple_of(f) {
            return Err(Error::Config(format!(
                "VAE expects {}×W×3H with W, 3H divisible by {f}, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Returns `(μ, logvar)`, each `latent_channels × W/f × 3H/f`.
    pub fn encode_vars(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape.shape(x))?;
        let mut h = self.enc_in.forward(tape, p, x)?;
        for (down, block) in &self.enc_down {
            h = tape.silu(h)?;
            h = down.forward(tape, p, h)?;
            h = res_block(tape, p, block, h)?;
        }
        h = tape.silu(h)?;
        let out = self.enc_out.forward(tape, p, h)?;
        let l = self.cfg.latent_channels;
        let mu = tape.slice(out, 0, 0, l)?;
        let lv = tape.slice(out, 0, l, l)?;
        let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, lv))
    }

    pub fn decode_var(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(tape, p, z)?;
        for (block, up) in &self.dec_up {
            h = res_block(tape, p, block, h)?;
            h = tape.silu(h)?;
            h = tape.upsample_nearest(h, 2)?;
            h = up.forward(tape, p, h)?;
        }
        h = tape.silu(h)?;
        Ok(self.dec_out.forward(tape, p, h)?)
    }

    /// Deterministic encoding: `z = μ`.
    pub fn encode(&self, rp: &RolledPlane) -> Result<TriplaneLatent> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(rp.tensor.clone());
        let (mu, lv) = self.encode_vars(&mut tape, &p, x)?;
        let mu = tape.value(mu).clone();
        Ok(TriplaneLatent {
            z: mu.clone(),
            mu,
            logvar: tape.value(lv).clone(),
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<RolledPlane> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = tape.constant(z.clone());
        let out = self.decode_var(&mut tape, &p, z)?;
        Ok(RolledPlane {
            tensor: tape.value(out).clone(),
            color_channels: self.cfg.color_channels,
        })
    }

    pub fn reconstruct(&self, tp: &TriPlane) -> Result<TriPlane> {
        let z = self.encode(&rollout(tp))?.z;
        let mut out = unroll(&self.decode(&z)?)?;
        out.clamp_in_place();
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_bundle(path, self.store.named(), serde_json::json!({ "config": self.cfg }))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (entries, meta) = load_bundle(path)?;
        let cfg: VaeConfig = serde_json::from_value(meta["config"].clone())?;
        let mut vae = Self::new(cfg)?;
        vae.store.load_named(entries)?;
        Ok(vae)
    }
}

/// KL(N(μ, e^logvar) ‖ N(0, 1)) averaged over elements.
pub fn kl_divergence(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.sub(s, 1.0)?;
    let m = tape.mean(s)?;
    Ok(tape.mul(m, 0.5)?)
}

/// Sum of per-plane TV over a rolled `C×W×3H` map.
pub fn rolled_tv(tape: &mut Tape, rolled: Var) -> Result<Var> {
    let h = tape.shape(rolled)[2] / 3;
    let mut acc: Option<Var> = None;
    for p in 0..3 {
        let plane = tape.slice(rolled, 2, p * h, h)?;
        let tv = plane_tv_var(tape, plane)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, tv)?,
            None => tv,
        });
    }
    Ok(acc.expect("three planes"))
}

/// `mean (x − x̂)² + kl_weight·KL + tv_weight·TV(x̂)`.
pub fn vae_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f32,
    tv_weight: f32,
) -> Result<Var> {
    let rec = tape.mse(x_hat, x)?;
    let kl = kl_divergence(tape, mu, logvar)?;
    let kl = tape.mul(kl, kl_weight)?;
    let tv = rolled_tv(tape, x_hat)?;
    let tv = tape.mul(tv, tv_weight)?;
    let l = tape.add(rec, kl)?;
    Ok(tape.add(l, tv)?)
}

#[derive(Clone, Debug)]
pub struct VaeTraining {
    pub vae: TriplaneVae,
    pub losses: Vec<f32>,
}

/// Trains on rolled tri-planes with reparameterized posterior samples.
pub fn train_vae(data: &[TriPlane], cfg: &VaeConfig) -> Result<VaeTraining> {
    if data.is_empty() {
        return Err(Error::Config("VAE training needs at least one tri-plane".into()));
    }
    let mut vae = TriplaneVae::new(cfg.clone())?;
    let rolled: Vec<RolledPlane> = data.iter().map(rollout).collect();
    let mut r = rng::derive(cfg.seed, 37);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..rolled.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.clamp(1, rolled.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let p = vae.store.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let rp = &rolled[order[cursor]];
            cursor += 1;
            let x = tape.constant(rp.tensor.clone());
            let (mu, lv) = vae.encode_vars(&mut tape, &p, x)?;
            let eps = Tensor::randn(tape.shape(mu), &mut r);
            let eps = tape.constant(eps);
            let half = tape.mul(lv, 0.5)?;
            let std = tape.exp(half)?;
            let noise = tape.mul(std, eps)?;
            let z = tape.add(mu, noise)?;
            let x_hat = vae.decode_var(&mut tape, &p, z)?;
            let loss = vae_loss(&mut tape, x, x_hat, mu, lv, cfg.kl_weight, cfg.tv_weight)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
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
        vae.store.apply(&mut opt, &p, &grads).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        if step % 200 == 0 {
            log::debug!("vae step {step}: loss {value:.5}");
        }
    }
    Ok(VaeTraining { vae, losses })
}

/// Per-channel latent statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channel-wise mean and population standard deviation over every spatial
/// position of every latent.
pub fn compute_latent_stats(latents: &[Tensor]) -> Result<LatentStats> {
    if latents.len() < 2 {
        return Err(Error::Config(format!("need at least 2 latents, got {}", latents.len())));
    }
    let shape = latents[0].shape().to_vec();
    if shape.len() != 3 || latents.iter().any(|l| l.shape() != shape.as_slice()) {
        return Err(Error::Config("latents must share one C×H×W shape".into()));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let count = (hw * latents.len()) as f64;
    let mut mean = vec![0.0f64; c];
    for l in latents {
        for ch in 0..c {
            mean[ch] += l.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; c];
    for l in latents {
        for ch in 0..c {
            var[ch] += l.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|&v| (v as f64 - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    if let Some(ch) = std.iter().position(|&s| s < STD_FLOOR) {
        return Err(Error::Config(format!(
            "latent channel {ch} has degenerate std {:.3e}",
            std[ch]
        )));
    }
    Ok(LatentStats { mean, std })
}

fn per_channel(l: &Tensor, stats: &LatentStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
    let c = l.shape()[0];
    if c != stats.mean.len() {
        return Err(Error::Config(format!("latent has {c} channels, stats have {}", stats.mean.len())));
    }
    let hw = l.numel() / c;
    let data = l
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / hw;
            f(v as f64, stats.mean[ch], stats.std[ch]) as f32
        })
        .collect();
    Ok(Tensor::new(l.shape(), data)?)
}

/// `(l − μ) / σ` channel-wise.
pub fn normalize(l: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    per_channel(l, stats, |v, m, s| (v - m) / s)
}

pub fn denormalize(l: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    per_channel(l, stats, |v, m, s| v * s + m)
}
