//! Tri-plane feature fields and the shared color/density decoder.
//!
//! A point `(x, y, z)` samples `F_xy` at `(x, y)`, `F_yz` at `(y, z)` and
//! `F_xz` at `(x, z)`. The first `color_channels` channels of every plane
//! feed the color MLP, the rest feed the density MLP.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use trigen_core::io::{load_bundle, save_bundle};
use trigen_core::nn::{Activation, Bound, Mlp, ParamStore};
use trigen_core::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Bound on every stored tri-plane value.
pub const PLANE_CLAMP: f32 = 5.0;
pub const PLANE_NAMES: [&str; 3] = ["xy", "yz", "xz"];

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    planes: [Tensor; 3],
    color_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriPlaneMeta {
    pub channels: usize,
    pub split: usize,
    pub resolution: [usize; 2],
}

impl TriPlane {
    pub fn zeros(channels: usize, width: usize, height: usize, color_channels: usize) -> Result<Self> {
        let p = Tensor::zeros(&[channels, width, height]);
        Self::from_planes([p.clone(), p.clone(), p], color_channels)
    }

    pub fn from_planes(planes: [Tensor; 3], color_channels: usize) -> Result<Self> {
        let s = planes[0].shape().to_vec();
        if s.len() != 3 || planes.iter().any(|p| p.shape() != s.as_slice()) {
            return Err(Error::Config(format!(
                "planes must share one C×W×H shape, got {:?}",
                planes.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        if color_channels == 0 || color_channels >= s[0] {
            return Err(Error::Config(format!(
                "color split {color_channels} must leave channels on both sides of {}",
                s[0]
            )));
        }
        Ok(Self { planes, color_channels })
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.planes[0].shape()[1]
    }

    pub fn height(&self) -> usize {
        self.planes[0].shape()[2]
    }

    pub fn color_channels(&self) -> usize {
        self.color_channels
    }

    pub fn density_channels(&self) -> usize {
        self.channels() - self.color_channels
    }

    pub fn planes(&self) -> &[Tensor; 3] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [Tensor; 3] {
        &mut self.planes
    }

    pub fn into_planes(self) -> [Tensor; 3] {
        self.planes
    }

    pub fn meta(&self) -> TriPlaneMeta {
        TriPlaneMeta {
            channels: self.channels(),
            split: self.color_channels,
            resolution: [self.width(), self.height()],
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.planes.iter().map(Tensor::abs_max).fold(0.0, f32::max)
    }

    pub fn clamp_in_place(&mut self) {
        for p in &mut self.planes {
            for v in p.data_mut() {
                *v = v.clamp(-PLANE_CLAMP, PLANE_CLAMP);
            }
        }
    }

    /// Records the planes on a tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 3] {
        self.planes.clone().map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(self.meta())?;
        save_bundle(path, PLANE_NAMES.iter().copied().zip(self.planes.iter()), meta)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (entries, meta) = load_bundle(path)?;
        let meta: TriPlaneMeta = serde_json::from_value(meta)?;
        let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        if names != PLANE_NAMES {
            return Err(Error::Config(format!("expected planes {PLANE_NAMES:?}, found {names:?}")));
        }
        let mut it = entries.into_iter().map(|(_, t)| t);
        let planes = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
        let tp = Self::from_planes(planes, meta.split)?;
        if tp.meta() != meta {
            return Err(Error::Config(format!("sidecar {meta:?} disagrees with payload {:?}", tp.meta())));
        }
        Ok(tp)
    }
}

pub fn clamp_triplane(tp: &TriPlane) -> TriPlane {
    let mut out = tp.clone();
    out.clamp_in_place();
    out
}

/// Anisotropic squared total variation of one `C×W×H` plane: the mean
/// squared difference along W plus the mean squared difference along H.
pub fn plane_tv(p: &Tensor) -> f32 {
    let (c, w, h) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let d = p.data();
    let (mut sw, mut sh) = (0.0f64, 0.0f64);
    for ch in 0..c {
        for i in 0..w {
            for j in 0..h {
                let v = d[(ch * w + i) * h + j] as f64;
                if i + 1 < w {
                    let e = d[(ch * w + i + 1) * h + j] as f64 - v;
                    sw += e * e;
                }
                if j + 1 < h {
                    let e = d[(ch * w + i) * h + j + 1] as f64 - v;
                    sh += e * e;
                }
            }
        }
    }
    let mut tv = 0.0;
    if w > 1 {
        tv += sw / (c * (w - 1) * h) as f64;
    }
    if h > 1 {
        tv += sh / (c * w * (h - 1)) as f64;
    }
    tv as f32
}

pub fn tv_loss(tp: &TriPlane) -> f32 {
    tp.planes.iter().map(plane_tv).sum()
}

/// Mean absolute value over every entry of the three planes.
pub fn l1_loss(tp: &TriPlane) -> f32 {
    let (sum, n) = tp.planes.iter().fold((0.0f64, 0usize), |(s, n), p| {
        (s + p.data().iter().map(|v| v.abs() as f64).sum::<f64>(), n + p.numel())
    });
    (sum / n.max(1) as f64) as f32
}

/// Differentiable [`plane_tv`] for a `C×W×H` variable.
pub fn plane_tv_var(tape: &mut Tape, p: Var) -> Result<Var> {
    let s = tape.shape(p).to_vec();
    let mut total: Option<Var> = None;
    for axis in [1, 2] {
        let n = s[axis];
        if n < 2 {
            continue;
        }
        let hi = tape.slice(p, axis, 1, n - 1)?;
        let lo = tape.slice(p, axis, 0, n - 1)?;
        let d = tape.sub(hi, lo)?;
        let sq = tape.square(d)?;
        let m = tape.mean(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

pub fn tv_loss_var(tape: &mut Tape, planes: &[Var; 3]) -> Result<Var> {
    let mut acc = plane_tv_var(tape, planes[0])?;
    for &p in &planes[1..] {
        let t = plane_tv_var(tape, p)?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

pub fn l1_loss_var(tape: &mut Tape, planes: &[Var; 3]) -> Result<Var> {
    let n: usize = planes.iter().map(|&p| tape.value(p).numel()).sum();
    let mut acc: Option<Var> = None;
    for &p in planes {
        let a = tape.abs(p)?;
        let s = tape.sum(a)?;
        acc = Some(match acc {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.div(acc.expect("three planes"), n as f32)?)
}

/// Two decoders (color, density) or the single-MLP ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    Disentangled,
    Unified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Density is `softplus(gain · raw)`; the gain lets a small head reach
    /// opaque densities quickly.
    pub density_gain: f32,
    /// Initial bias of the raw density output, so a fresh field starts
    /// nearly transparent.
    pub density_bias_init: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Disentangled,
            hidden: 64,
            hidden_layers: 3,
            density_gain: 10.0,
            density_bias_init: -0.5,
        }
    }
}

/// Decoder weights shared across every tri-plane.
#[derive(Clone, Debug)]
pub struct SharedDecoder {
    pub cfg: DecoderConfig,
    pub color_channels: usize,
    pub density_channels: usize,
    pub store: ParamStore,
    color: Mlp,
    density: Option<Mlp>,
}

impl SharedDecoder {
    pub fn new(cfg: DecoderConfig, color_channels: usize, density_channels: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let hidden = vec![cfg.hidden; cfg.hidden_layers];
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend(&hidden);
            w.push(output);
            w
        };
        let (color, density) = match cfg.kind {
            DecoderKind::Disentangled => {
                let color = Mlp::new(&mut store, "color", &widths(3 * color_channels, 3), Activation::Silu, rng);
                let density = Mlp::new(&mut store, "density", &widths(3 * density_channels, 1), Activation::Silu, rng);
                let last = density.layers.last().expect("non-empty").bias;
                store.get_mut(last).data_mut().fill(cfg.density_bias_init);
                (color, Some(density))
            }
            DecoderKind::Unified => {
                let c = 3 * (color_channels + density_channels);
                let mlp = Mlp::new(&mut store, "unified", &widths(c, 4), Activation::Silu, rng);
                let last = mlp.layers.last().expect("non-empty").bias;
                store.get_mut(last).data_mut()[3] = cfg.density_bias_init;
                (mlp, None)
            }
        };
        Self {
            cfg,
            color_channels,
            density_channels,
            store,
            color,
            density,
        }
    }

    pub fn for_triplane(cfg: DecoderConfig, tp: &TriPlane, rng: &mut impl Rng) -> Self {
        Self::new(cfg, tp.color_channels(), tp.density_channels(), rng)
    }

    pub fn zero_biases(&mut self) {
        self.color.zero_biases(&mut self.store);
        if let Some(d) = &self.density {
            d.zero_biases(&mut self.store);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    /// Decodes `[N×3]` points into `rgb: [N×3]` in `[0, 1]` and `sigma: [N]`.
    pub fn decode(&self, tape: &mut Tape, params: &Bound, planes: &[Var; 3], xyz: &Tensor) -> Result<(Var, Var)> {
        let n = xyz.shape()[0];
        let p = xyz.data();
        let coords = [(0usize, 1usize), (1, 2), (0, 2)];
        let mut feats = Vec::with_capacity(3);
        for (plane, (a, b)) in planes.iter().zip(coords) {
            let uv = Tensor::new(&[n, 2], (0..n).flat_map(|i| [p[3 * i + a], p[3 * i + b]]).collect())?;
            let uv = tape.constant(uv);
            feats.push(tape.grid_sample_2d(*plane, uv)?);
        }
        let cc = self.color_channels;
        let dc = self.density_channels;
        let (rgb_raw, sigma_raw) = match &self.density {
            Some(density) => {
                let mut color_in = Vec::with_capacity(3);
                let mut density_in = Vec::with_capacity(3);
                for &f in &feats {
                    color_in.push(tape.slice(f, 1, 0, cc)?);
                    density_in.push(tape.slice(f, 1, cc, dc)?);
                }
                let ci = tape.concat(&color_in, 1)?;
                let di = tape.concat(&density_in, 1)?;
                (self.color.forward(tape, params, ci)?, density.forward(tape, params, di)?)
            }
            None => {
                let x = tape.concat(&feats, 1)?;
                let out = self.color.forward(tape, params, x)?;
                (tape.slice(out, 1, 0, 3)?, tape.slice(out, 1, 3, 1)?)
            }
        };
        let rgb = tape.sigmoid(rgb_raw)?;
        let scaled = tape.mul(sigma_raw, self.cfg.density_gain)?;
        let sigma = tape.softplus(scaled)?;
        let sigma = tape.reshape(sigma, &[n])?;
        Ok((rgb, sigma))
    }

    /// Single-point convenience wrapper around [`SharedDecoder::decode`].
    pub fn decode_point(&self, tp: &TriPlane, xyz: [f32; 3]) -> Result<([f32; 3], f32)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let planes = tp.bind(&mut tape, false);
        let (rgb, sigma) = self.decode(&mut tape, &params, &planes, &Tensor::new(&[1, 3], xyz.to_vec())?)?;
        let c = tape.value(rgb).data();
        Ok(([c[0], c[1], c[2]], tape.value(sigma).item()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "color_channels": self.color_channels,
            "density_channels": self.density_channels,
        });
        save_bundle(path, self.store.named(), meta)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (entries, meta) = load_bundle(path)?;
        let cfg: DecoderConfig = serde_json::from_value(meta["config"].clone())?;
        let cc = meta["color_channels"].as_u64().unwrap_or(0) as usize;
        let dc = meta["density_channels"].as_u64().unwrap_or(0) as usize;
        let mut rng = trigen_core::rng::seeded(0);
        let mut dec = Self::new(cfg, cc, dc, &mut rng);
        dec.store.load_named(entries)?;
        Ok(dec)
    }
}
