//! Tri-plane fitting: a shared decoder trained jointly with one tri-plane
//! per object, then per-object fits against the frozen decoder.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use trigen_core::nn::Bound;
use trigen_core::{adam_step, rng, Adam, AdamConfig, AdamState, NumError, Tape, Tensor, Var};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{psnr_slices, Image};
use crate::render::{render_image, render_rays, RenderConfig};
use crate::triplane::{l1_loss, l1_loss_var, tv_loss, tv_loss_var, DecoderConfig, SharedDecoder, TriPlane};

pub use crate::image::psnr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriPlaneShape {
    pub channels: usize,
    pub resolution: usize,
    pub color_channels: usize,
}

impl Default for TriPlaneShape {
    fn default() -> Self {
        Self {
            channels: 16,
            resolution: 64,
            color_channels: 8,
        }
    }
}

impl TriPlaneShape {
    pub fn zeros(&self) -> Result<TriPlane> {
        TriPlane::zeros(self.channels, self.resolution, self.resolution, self.color_channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// TV weight λ1.
    pub tv_weight: f32,
    /// L1 weight λ2.
    pub l1_weight: f32,
    pub lr_planes: f32,
    pub lr_decoder: f32,
    pub steps: usize,
    pub n_views: usize,
    pub rays_per_batch: usize,
    /// Objects rendered per shared-training step.
    pub objects_per_step: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub triplane: TriPlaneShape,
    pub decoder: DecoderConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tv_weight: 2e-3,
            l1_weight: 1e-4,
            lr_planes: 2e-2,
            lr_decoder: 2e-3,
            steps: 2000,
            n_views: 10,
            rays_per_batch: 512,
            objects_per_step: 2,
            n_samples: 32,
            seed: 0,
            triplane: TriPlaneShape::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight >= 0.0 && self.l1_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.rays_per_batch == 0 || self.objects_per_step == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    fn render_cfg(&self) -> RenderConfig {
        RenderConfig::new(self.n_samples)
    }
}

/// Ground-truth views of one object.
#[derive(Clone, Debug)]
pub struct MultiViewSample {
    pub id: String,
    pub views: Vec<(Camera, Image)>,
    pub caption: Option<String>,
}

impl MultiViewSample {
    pub fn new(id: &str, views: Vec<(Camera, Image)>, caption: Option<String>) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Config(format!("{id}: need at least 2 views, got {}", views.len())));
        }
        let (w, h) = (views[0].1.width(), views[0].1.height());
        for (cam, img) in &views {
            if img.width() != w || img.height() != h || cam.width != w || cam.height != h {
                return Err(Error::Config(format!("{id}: views disagree on resolution")));
            }
        }
        Ok(Self {
            id: id.to_string(),
            views,
            caption,
        })
    }
}

/// `mean_pixels ‖G − c‖² + λ1·TV + λ2·L1` on the tape; colors are `[P×3]`.
pub fn fit_loss(tape: &mut Tape, pred: Var, gt: Var, planes: &[Var; 3], tv_weight: f32, l1_weight: f32) -> Result<Var> {
    let mse = tape.mse(pred, gt)?;
    let mut loss = tape.mul(mse, 3.0)?;
    if tv_weight != 0.0 {
        let tv = tv_loss_var(tape, planes)?;
        let tv = tape.mul(tv, tv_weight)?;
        loss = tape.add(loss, tv)?;
    }
    if l1_weight != 0.0 {
        let l1 = l1_loss_var(tape, planes)?;
        let l1 = tape.mul(l1, l1_weight)?;
        loss = tape.add(loss, l1)?;
    }
    Ok(loss)
}

/// Value-only counterpart of [`fit_loss`].
pub fn fit_loss_value(pred: &Tensor, gt: &Tensor, tp: &TriPlane, tv_weight: f32, l1_weight: f32) -> Result<f32> {
    if pred.shape() != gt.shape() {
        return Err(Error::Num(NumError::ShapeMismatch {
            op: "fit_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        }));
    }
    let pixels = (pred.numel() / 3).max(1);
    let sq: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((sq / pixels as f64) as f32 + tv_weight * tv_loss(tp) + l1_weight * l1_loss(tp))
}

/// Per-object Adam state for the three planes.
#[derive(Clone, Debug, Default)]
struct PlaneOptim {
    states: [AdamState; 3],
}

impl PlaneOptim {
    fn step(&mut self, tp: &mut TriPlane, grads: [Tensor; 3], cfg: &AdamConfig) -> Result<()> {
        for ((p, g), s) in tp.planes_mut().iter_mut().zip(grads.iter()).zip(self.states.iter_mut()) {
            adam_step(p, g, s, cfg)?;
        }
        tp.clamp_in_place();
        Ok(())
    }
}

fn diverged(step: usize, e: impl std::fmt::Display) -> Error {
    Error::Diverged {
        step,
        detail: e.to_string(),
    }
}

/// Loss of one random ray batch from one random view, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
fn object_batch_loss(
    tape: &mut Tape,
    dec: &SharedDecoder,
    params: &Bound,
    planes: &[Var; 3],
    sample: &MultiViewSample,
    cfg: &FitConfig,
    rng: &mut rng::Rng,
) -> Result<Var> {
    let (cam, img) = &sample.views[rng.random_range(0..sample.views.len())];
    let n_pixels = cam.width * cam.height;
    let pixels: Vec<usize> = sample_indices(rng, n_pixels, cfg.rays_per_batch.min(n_pixels)).into_vec();
    let rays: Vec<_> = pixels.iter().map(|&p| cam.pixel_ray(p % cam.width, p / cam.width)).collect();
    let pred = render_rays(tape, &rays, &cfg.render_cfg(), Some(rng), |t, xyz| dec.decode(t, params, planes, xyz))?;
    let gt = tape.constant(img.gather(&pixels));
    fit_loss(tape, pred, gt, planes, cfg.tv_weight, cfg.l1_weight)
}

/// Result of joint decoder training.
#[derive(Clone, Debug)]
pub struct SharedFit {
    pub decoder: SharedDecoder,
    pub triplanes: Vec<TriPlane>,
    /// Mean batch loss per step.
    pub losses: Vec<f32>,
}

/// Jointly optimizes one decoder and one tri-plane per object.
pub fn train_shared_decoder(dataset: &[MultiViewSample], cfg: &FitConfig) -> Result<SharedFit> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Config(format!("need at least 2 objects, got {}", dataset.len())));
    }
    let mut rng = rng::derive(cfg.seed, 11);
    let template = cfg.triplane.zeros()?;
    let mut decoder = SharedDecoder::for_triplane(cfg.decoder.clone(), &template, &mut rng);
    let mut triplanes = vec![template; dataset.len()];
    let mut plane_opt = vec![PlaneOptim::default(); dataset.len()];
    let mut dec_opt = Adam::new(AdamConfig::with_lr(cfg.lr_decoder));
    let plane_cfg = AdamConfig::with_lr(cfg.lr_planes);
    let per_step = cfg.objects_per_step.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut chosen = Vec::with_capacity(per_step);
        while chosen.len() < per_step {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            chosen.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let params = decoder.bind(&mut tape, true);
        let mut bound = Vec::with_capacity(per_step);
        let mut total: Option<Var> = None;
        for &i in &chosen {
            let planes = triplanes[i].bind(&mut tape, true);
            let loss = object_batch_loss(&mut tape, &decoder, &params, &planes, &dataset[i], cfg, &mut rng)
                .map_err(|e| diverged(step, e))?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
            bound.push((i, planes));
        }
        let total = tape.div(total.expect("at least one object"), per_step as f32)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(diverged(step, format!("loss {value}")));
        }
        losses.push(value);
        let grads = tape.backward(total)?;
        decoder
            .store
            .apply(&mut dec_opt, &params, &grads)
            .map_err(|e| diverged(step, e))?;
        for (i, planes) in bound {
            let g = planes.map(|v| grads.wrt(v));
            plane_opt[i].step(&mut triplanes[i], g, &plane_cfg).map_err(|e| diverged(step, e))?;
        }
        if step % 200 == 0 {
            log::debug!("shared fit step {step}: loss {value:.5}");
        }
    }
    Ok(SharedFit {
        decoder,
        triplanes,
        losses,
    })
}

/// Per-object fit result.
#[derive(Clone, Debug)]
pub struct ObjectFit {
    pub triplane: TriPlane,
    pub losses: Vec<f32>,
}

/// Fits a fresh tri-plane to one object with the decoder held fixed.
pub fn fit_object(sample: &MultiViewSample, dec: &SharedDecoder, cfg: &FitConfig) -> Result<ObjectFit> {
    let init = cfg.triplane.zeros()?;
    fit_object_from(sample, dec, cfg, init)
}

/// Like [`fit_object`] but starting from a given tri-plane.
pub fn fit_object_from(sample: &MultiViewSample, dec: &SharedDecoder, cfg: &FitConfig, init: TriPlane) -> Result<ObjectFit> {
    cfg.validate()?;
    let mut rng = rng::derive(cfg.seed, 23);
    let mut tp = init;
    let mut opt = PlaneOptim::default();
    let plane_cfg = AdamConfig::with_lr(cfg.lr_planes);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let params = dec.bind(&mut tape, false);
        let planes = tp.bind(&mut tape, true);
        let loss =
            object_batch_loss(&mut tape, dec, &params, &planes, sample, cfg, &mut rng).map_err(|e| diverged(step, e))?;
        let value = tape.value(loss).item();
        losses.push(value);
        let grads = tape.backward(loss)?;
        opt.step(&mut tp, planes.map(|v| grads.wrt(v)), &plane_cfg)
            .map_err(|e| diverged(step, e))?;
    }
    Ok(ObjectFit { triplane: tp, losses })
}

/// Mean PSNR of deterministic renders against every ground-truth view.
pub fn evaluate_psnr(tp: &TriPlane, dec: &SharedDecoder, sample: &MultiViewSample, n_samples: usize) -> Result<f32> {
    let mut total = 0.0;
    for (cam, gt) in &sample.views {
        let img = render_image(tp, dec, cam, n_samples)?;
        total += psnr_slices(img.data(), gt.data());
    }
    Ok(total / sample.views.len() as f32)
}
