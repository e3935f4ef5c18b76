//! Score-model interface for distillation, the image codecs used by the
//! latent mode, and an analytic per-view prior.

use trigen_core::nn::{Conv2d, ParamStore};
use trigen_core::{rng, Adam, AdamConfig, Tape, Tensor, Var};
use trigen_stage1::diffusion::{AnalyticGaussianScore, ConditioningEmbedding, NoisePredictor, NoiseSchedule};
use trigen_stage1::Camera;

use crate::error::{RefineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Noise prediction on codec latents of the render.
    Latent,
    /// Noise prediction on pixels, conditioned on a coarse render.
    PixelSuperRes,
}

/// Everything a prior may condition on besides `x_t` and `t`.
pub struct ScoreQuery<'a> {
    pub embedding: &'a ConditioningEmbedding,
    pub camera: &'a Camera,
    /// Low-resolution conditioning render, pixel mode only.
    pub coarse: Option<&'a Tensor>,
    /// The noise used to form `x_t`. Real priors ignore it; test oracles
    /// may echo it.
    pub injected_noise: &'a Tensor,
}

/// A frozen diffusion prior. Never receives gradients: it sees plain
/// tensors, not tape variables.
pub trait ScoreModel {
    fn mode(&self) -> ScoreMode;
    fn schedule(&self) -> &NoiseSchedule;
    fn predict_noise(&self, x_t: &Tensor, t: usize, q: &ScoreQuery<'_>) -> Result<Tensor>;
    /// Image↔latent codec; required in latent mode.
    fn codec(&self) -> Option<&dyn Codec> {
        None
    }
}

/// Differentiable encoder from `[3×H×W]` images to latents, plus a
/// value-only decoder.
pub trait Codec {
    fn encode(&self, tape: &mut Tape, image: Var) -> Result<Var>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;

    fn encode_value(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let z = self.encode(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, _tape: &mut Tape, image: Var) -> Result<Var> {
        Ok(image)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(latent.clone())
    }
}

/// Average-pool-by-4 encoder with a 1×1 projection; the decoder upsamples
/// by nearest neighbour and applies a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct PoolCodec {
    pub factor: usize,
    pub store: ParamStore,
    pub proj: Conv2d,
    pub out: Conv2d,
}

impl PoolCodec {
    pub const LATENT_CHANNELS: usize = 4;

    pub fn new(seed: u64) -> Self {
        let mut r = rng::derive(seed, 0xc0dec);
        let mut store = ParamStore::new();
        let proj = Conv2d::new(&mut store, "enc", 3, Self::LATENT_CHANNELS, 1, 1, 0, &mut r);
        let out = Conv2d::new(&mut store, "dec", Self::LATENT_CHANNELS, 3, 3, 1, 1, &mut r);
        Self {
            factor: 4,
            store,
            proj,
            out,
        }
    }

    fn decode_var(&self, tape: &mut Tape, p: &trigen_core::nn::Bound, z: Var) -> Result<Var> {
        let up = tape.upsample_nearest(z, self.factor)?;
        Ok(self.out.forward(tape, p, up)?)
    }

    fn encode_with(&self, tape: &mut Tape, p: &trigen_core::nn::Bound, x: Var) -> Result<Var> {
        let pooled = tape.avg_pool2d(x, self.factor)?;
        Ok(self.proj.forward(tape, p, pooled)?)
    }

    /// Reconstruction training on `[3×H×W]` images; returns the final loss.
    pub fn train(&mut self, images: &[Tensor], steps: usize, lr: f32) -> Result<f32> {
        if images.is_empty() {
            return Err(RefineError::Config("codec training needs images".into()));
        }
        let mut opt = Adam::new(AdamConfig::with_lr(lr));
        let mut last = f32::NAN;
        for s in 0..steps {
            let img = &images[s % images.len()];
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, true);
            let x = tape.constant(img.clone());
            let z = self.encode_with(&mut tape, &p, x)?;
            let y = self.decode_var(&mut tape, &p, z)?;
            let loss = tape.mse(y, x)?;
            last = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            self.store.apply(&mut opt, &p, &grads)?;
        }
        Ok(last)
    }
}

impl Codec for PoolCodec {
    fn encode(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let p = self.store.bind(tape, false);
        self.encode_with(tape, &p, image)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let z = tape.constant(latent.clone());
        let y = self.decode_var(&mut tape, &p, z)?;
        Ok(tape.value(y).clone())
    }
}

/// Analytic Gaussian prior whose mean depends on the view: each query uses
/// the target of the nearest registered camera direction. Targets are given
/// as images and encoded once when a codec is present.
pub struct ViewAnalyticPrior {
    mode: ScoreMode,
    schedule: NoiseSchedule,
    views: Vec<(Camera, AnalyticGaussianScore)>,
    codec: Option<Box<dyn Codec>>,
}

impl ViewAnalyticPrior {
    pub fn pixel(targets: Vec<(Camera, Tensor)>, sigma_data: f32, schedule: NoiseSchedule) -> Result<Self> {
        Self::build(ScoreMode::PixelSuperRes, targets, sigma_data, schedule, None)
    }

    pub fn latent(targets: Vec<(Camera, Tensor)>, sigma_data: f32, schedule: NoiseSchedule, codec: Box<dyn Codec>) -> Result<Self> {
        Self::build(ScoreMode::Latent, targets, sigma_data, schedule, Some(codec))
    }

    fn build(
        mode: ScoreMode,
        targets: Vec<(Camera, Tensor)>,
        sigma_data: f32,
        schedule: NoiseSchedule,
        codec: Option<Box<dyn Codec>>,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(RefineError::Config("analytic prior needs at least one view".into()));
        }
        let mut views = Vec::with_capacity(targets.len());
        for (cam, img) in targets {
            let mean = match &codec {
                Some(c) => c.encode_value(&img)?,
                None => img,
            };
            views.push((cam, AnalyticGaussianScore::new(mean, sigma_data, schedule.clone())));
        }
        Ok(Self {
            mode,
            schedule,
            views,
            codec,
        })
    }

    pub fn target_for(&self, cam: &Camera) -> &Tensor {
        &self.nearest(cam).mean
    }

    fn nearest(&self, cam: &Camera) -> &AnalyticGaussianScore {
        let dir = |c: &Camera| trigen_core::vec3::normalize(c.position());
        let d = dir(cam);
        self.views
            .iter()
            .max_by(|a, b| {
                let da = trigen_core::vec3::dot(dir(&a.0), d);
                let db = trigen_core::vec3::dot(dir(&b.0), d);
                da.total_cmp(&db)
            })
            .map(|(_, s)| s)
            .expect("non-empty")
    }
}

impl ScoreModel for ViewAnalyticPrior {
    fn mode(&self) -> ScoreMode {
        self.mode
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, q: &ScoreQuery<'_>) -> Result<Tensor> {
        Ok(self.nearest(q.camera).predict_noise(x_t, t, q.embedding)?)
    }

    fn codec(&self) -> Option<&dyn Codec> {
        self.codec.as_deref()
    }
}

/// Returns the injected noise exactly: the distillation fixed point.
pub struct NoiseEcho {
    pub mode: ScoreMode,
    pub schedule: NoiseSchedule,
}

impl ScoreModel for NoiseEcho {
    fn mode(&self) -> ScoreMode {
        self.mode
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, _x_t: &Tensor, _t: usize, q: &ScoreQuery<'_>) -> Result<Tensor> {
        Ok(q.injected_noise.clone())
    }

    fn codec(&self) -> Option<&dyn Codec> {
        Some(&IdentityCodec)
    }
}
