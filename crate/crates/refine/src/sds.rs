//! Optimizable refinement state and the three optimization steps run on it:
//! texture distillation from stage-one renders, latent-space score
//! distillation and pixel-space score distillation.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use trigen_core::{rng, Adam, AdamConfig, Gradients, Tape, Tensor, Var};
use trigen_stage1::diffusion::{cfg_epsilon, embed_caption, q_sample, ConditioningEmbedding, NoiseSchedule};
use trigen_stage1::{Camera, Image};

use crate::error::{RefineError, Result};
use crate::hashgrid::{BoundTexture, HashGridTexture};
use crate::marching::{extract, vertex_positions, McMesh};
use crate::mesh::Mesh;
use crate::raster::{chw_to_image, image_to_chw, render_textured};
use crate::score::{ScoreMode, ScoreModel, ScoreQuery};
use crate::sdf::SdfGrid;

pub const POSITIVE_SUFFIX: &str = "best quality, extremely detailed, masterpiece, high resolution, high quality";
pub const NEGATIVE_PROMPT: &str = "blur, lowres, cropped, low quality, worst quality, ugly, dark, shadow, oversaturated";

/// "front", "side" or "back" for an azimuth, splitting |azimuth| into thirds
/// of 60°.
pub fn view_direction(azimuth_deg: f32) -> &'static str {
    let a = azimuth_deg.rem_euclid(360.0);
    let folded = if a > 180.0 { 360.0 - a } else { a };
    if folded < 60.0 {
        "front"
    } else if folded < 120.0 {
        "side"
    } else {
        "back"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompts {
    pub base: String,
    pub positive_suffix: String,
    pub negative: String,
    pub directional: bool,
}

impl Prompts {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into(),
            positive_suffix: POSITIVE_SUFFIX.to_string(),
            negative: NEGATIVE_PROMPT.to_string(),
            directional: true,
        }
    }

    pub fn positive(&self, azimuth_deg: f32) -> String {
        let mut s = self.base.trim().to_string();
        if self.directional {
            s.push_str(&format!(", {} view", view_direction(azimuth_deg)));
        }
        if !self.positive_suffix.is_empty() {
            s.push_str(", ");
            s.push_str(&self.positive_suffix);
        }
        s
    }

    /// Conditional and negative (unconditional-branch) embeddings.
    pub fn embeddings(&self, azimuth_deg: f32) -> (ConditioningEmbedding, ConditioningEmbedding) {
        (embed_caption(&self.positive(azimuth_deg)), embed_caption(&self.negative))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub hash_grid: f32,
    pub mlp: f32,
    pub geometry: f32,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            hash_grid: 0.01,
            mlp: 0.001,
            geometry: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Weighting {
    /// `w(t) = σ_t²`, the reverse-process variance.
    PosteriorVariance,
    Constant(f64),
}

impl Weighting {
    pub fn at(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match *self {
            Weighting::PosteriorVariance => sched.posterior_variance(t),
            Weighting::Constant(w) => w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdsConfig {
    /// Fractions of the schedule length bounding the sampled timestep.
    pub t_range: (f64, f64),
    pub guidance: f32,
    pub weighting: Weighting,
    pub train_geometry: bool,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            t_range: (0.02, 0.98),
            guidance: 7.5,
            weighting: Weighting::PosteriorVariance,
            train_geometry: true,
        }
    }
}

/// `t = round(u·T)` with `u ~ U(lo, hi)`, kept inside `1..=T`.
pub fn sample_timestep(r: &mut impl Rng, steps: usize, range: (f64, f64)) -> usize {
    let u: f64 = r.random_range(range.0..range.1);
    ((u * steps as f64).round() as usize).clamp(1, steps)
}

/// Geometry, texture, optimizer state and iteration counter.
#[derive(Clone, Debug)]
pub struct RefineState {
    pub grid: SdfGrid,
    pub texture: HashGridTexture,
    /// Frozen copy of the texture used to render `x_coarse`.
    pub coarse_texture: Option<HashGridTexture>,
    pub lr: LearningRates,
    pub iteration: u64,
    opt_tables: Adam,
    opt_head: Adam,
    opt_geometry: Adam,
}

/// A state recorded on a tape together with its extracted topology.
struct BoundState {
    values: Var,
    offsets: Var,
    texture: BoundTexture,
    positions: Option<Var>,
    faces: Vec<[u32; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub t: usize,
    pub weight: f64,
    pub view: usize,
    pub skipped: bool,
    pub grad_norm: f32,
}

impl RefineState {
    pub fn new(grid: SdfGrid, texture: HashGridTexture, lr: LearningRates) -> Self {
        Self {
            grid,
            texture,
            coarse_texture: None,
            lr,
            iteration: 0,
            opt_tables: Adam::new(AdamConfig::with_lr(lr.hash_grid)),
            opt_head: Adam::new(AdamConfig::with_lr(lr.mlp)),
            opt_geometry: Adam::new(AdamConfig::with_lr(lr.geometry)),
        }
    }

    /// Freezes the current texture as the coarse texture.
    pub fn snapshot_coarse(&mut self) {
        self.coarse_texture = Some(self.texture.clone());
    }

    /// Extracted surface restricted to its largest connected component.
    pub fn topology(&self) -> (McMesh, Vec<[u32; 3]>) {
        let topo = extract(&self.grid);
        let faces = match topo.mesh.components().first() {
            Some(largest) => largest.iter().map(|&f| topo.mesh.faces[f]).collect(),
            None => Vec::new(),
        };
        (topo, faces)
    }

    /// Current surface as a compact mesh.
    pub fn mesh(&self) -> Mesh {
        let (topo, faces) = self.topology();
        Mesh {
            vertices: topo.mesh.vertices,
            faces,
            colors: None,
        }
        .compacted()
    }

    fn bind(&self, tape: &mut Tape, geometry: bool, texture: bool) -> Result<BoundState> {
        let leaf = |tape: &mut Tape, t: &Tensor, trainable: bool| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let values = leaf(tape, &self.grid.values, geometry);
        let offsets = leaf(tape, &self.grid.offsets, geometry);
        let tex = self.texture.bind(tape, texture);
        let (topo, faces) = self.topology();
        let positions = if topo.is_empty() {
            None
        } else {
            Some(vertex_positions(tape, &self.grid, &topo, values, offsets)?)
        };
        Ok(BoundState {
            values,
            offsets,
            texture: tex,
            positions,
            faces,
        })
    }

    fn render_bound(&self, tape: &mut Tape, b: &BoundState, tex: &HashGridTexture, tex_bound: &BoundTexture, cam: &Camera) -> Result<Var> {
        match b.positions {
            Some(pos) => render_textured(tape, pos, &b.faces, cam, tex, tex_bound),
            None => Ok(tape.constant(Tensor::ones(&[3, cam.height, cam.width]))),
        }
    }

    /// `[3×H×W]` render with the live texture.
    pub fn render_tensor(&self, cam: &Camera) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false)?;
        let img = self.render_bound(&mut tape, &b, &self.texture, &b.texture, cam)?;
        Ok(tape.value(img).clone())
    }

    /// `[3×H×W]` render with the frozen coarse texture.
    pub fn render_coarse_tensor(&self, cam: &Camera) -> Result<Tensor> {
        let tex = self
            .coarse_texture
            .as_ref()
            .ok_or_else(|| RefineError::Config("no coarse texture snapshot".into()))?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false, false)?;
        let tb = tex.bind(&mut tape, false);
        let img = self.render_bound(&mut tape, &b, tex, &tb, cam)?;
        Ok(tape.value(img).clone())
    }

    fn apply(&mut self, b: &BoundState, grads: &Gradients, geometry: bool) -> Result<()> {
        let gt = grads.wrt(b.texture.tables);
        self.opt_tables.step([&mut self.texture.tables], &[gt])?;
        self.texture.head_store.apply(&mut self.opt_head, &b.texture.head, grads)?;
        if geometry {
            let before = (self.grid.values.clone(), self.grid.offsets.clone());
            let g = [grads.wrt(b.values), grads.wrt(b.offsets)];
            self.opt_geometry.step([&mut self.grid.values, &mut self.grid.offsets], &g)?;
            self.grid.clamp_offsets();
            if !self.grid.has_zero_crossing() {
                warn!("geometry update removed the surface; reverted");
                (self.grid.values, self.grid.offsets) = before;
            }
        }
        Ok(())
    }
}

/// Interleaved render of the refined representation.
pub fn render_refined(state: &RefineState, cam: &Camera) -> Result<Image> {
    chw_to_image(&state.render_tensor(cam)?)
}

fn grads_finite(grads: &Gradients, vars: &[Var]) -> bool {
    vars.iter().all(|&v| grads.get(v).is_none_or(Tensor::is_finite))
}

fn tracked_vars(b: &BoundState) -> Vec<Var> {
    let mut v = vec![b.values, b.offsets, b.texture.tables];
    v.extend_from_slice(b.texture.head.vars());
    v
}

/// Fits the texture alone to stage-one renders by MSE; returns the mean loss
/// over the last tenth of the iterations (`NaN` when `iters = 0`).
pub fn texture_distill_init(state: &mut RefineState, views: &[(Camera, Image)], iters: usize, seed: u64) -> Result<f32> {
    if views.len() < 4 {
        return Err(RefineError::Config(format!("texture distillation needs at least 4 views, got {}", views.len())));
    }
    let targets: Vec<Tensor> = views.iter().map(|(_, img)| image_to_chw(img)).collect();
    let mut r = rng::derive(seed, 0xd157);
    let tail = (iters / 10).max(1);
    let (mut acc, mut n) = (0.0f64, 0usize);
    for i in 0..iters {
        let k = r.random_range(0..views.len());
        let mut tape = Tape::new();
        let b = state.bind(&mut tape, false, true)?;
        let x = state.render_bound(&mut tape, &b, &state.texture, &b.texture, &views[k].0)?;
        let target = tape.constant(targets[k].clone());
        let loss = tape.mse(x, target)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(RefineError::Diverged(format!("texture distillation loss {l} at iteration {i}")));
        }
        if i + tail >= iters {
            acc += l as f64;
            n += 1;
        }
        let grads = tape.backward(loss)?;
        if !grads_finite(&grads, &tracked_vars(&b)) {
            return Err(RefineError::Diverged(format!("non-finite texture gradient at iteration {i}")));
        }
        state.apply(&b, &grads, false)?;
        state.iteration += 1;
    }
    Ok(if n == 0 { f32::NAN } else { (acc / n as f64) as f32 })
}

/// One latent-space distillation step: render, encode, noise, query the
/// prior and push `w(t)(ε̂ − ε)` back through the encoder and renderer.
pub fn sds_latent_step(
    state: &mut RefineState,
    score: &dyn ScoreModel,
    prompts: &Prompts,
    cfg: &SdsConfig,
    views: &[Camera],
    seed: u64,
) -> Result<StepReport> {
    if score.mode() != ScoreMode::Latent || score.codec().is_none() {
        return Err(RefineError::Config("latent distillation needs a latent-mode prior with a codec".into()));
    }
    sds_step(state, score, prompts, cfg, views, seed)
}

/// One pixel-space distillation step conditioned on the coarse-texture
/// render from the same pose.
pub fn sds_pixel_step(
    state: &mut RefineState,
    score: &dyn ScoreModel,
    prompts: &Prompts,
    cfg: &SdsConfig,
    views: &[Camera],
    seed: u64,
) -> Result<StepReport> {
    if score.mode() != ScoreMode::PixelSuperRes {
        return Err(RefineError::Config("pixel distillation needs a pixel-mode prior".into()));
    }
    if state.coarse_texture.is_none() {
        state.snapshot_coarse();
    }
    sds_step(state, score, prompts, cfg, views, seed)
}

fn sds_step(
    state: &mut RefineState,
    score: &dyn ScoreModel,
    prompts: &Prompts,
    cfg: &SdsConfig,
    views: &[Camera],
    seed: u64,
) -> Result<StepReport> {
    if views.is_empty() {
        return Err(RefineError::Config("distillation needs at least one camera".into()));
    }
    let mut r = rng::derive(seed, state.iteration);
    let view = r.random_range(0..views.len());
    let cam = &views[view];
    let sched = score.schedule();
    let t = sample_timestep(&mut r, sched.steps(), cfg.t_range);
    let weight = cfg.weighting.at(sched, t);

    let mut tape = Tape::new();
    let b = state.bind(&mut tape, cfg.train_geometry, true)?;
    let x = state.render_bound(&mut tape, &b, &state.texture, &b.texture, cam)?;
    let z = match score.mode() {
        ScoreMode::Latent => score.codec().expect("checked by caller").encode(&mut tape, x)?,
        ScoreMode::PixelSuperRes => x,
    };
    let coarse = match score.mode() {
        ScoreMode::PixelSuperRes => Some(state.render_coarse_tensor(cam)?),
        ScoreMode::Latent => None,
    };
    let z0 = tape.value(z).clone();
    let eps = Tensor::randn(z0.shape(), &mut r);
    let z_t = q_sample(&z0, t, &eps, sched)?;
    let (cond, uncond) = prompts.embeddings(cam.azimuth_deg);
    let query = |e| ScoreQuery {
        embedding: e,
        camera: cam,
        coarse: coarse.as_ref(),
        injected_noise: &eps,
    };
    let eps_c = score.predict_noise(&z_t, t, &query(&cond))?;
    let eps_hat = if cfg.guidance == 1.0 {
        eps_c
    } else {
        let eps_u = score.predict_noise(&z_t, t, &query(&uncond))?;
        cfg_epsilon(&eps_c, &eps_u, cfg.guidance)?
    };
    let w = weight as f32;
    let g = eps_hat.zip_map(&eps, |a, e| w * (a - e))?;
    let mut report = StepReport {
        t,
        weight,
        view,
        skipped: false,
        grad_norm: g.l2_norm(),
    };
    state.iteration += 1;
    if !g.is_finite() {
        warn!("non-finite distillation gradient at t={t}; step skipped");
        report.skipped = true;
        return Ok(report);
    }
    let grads = tape.backward_seeded(z, g)?;
    if !grads_finite(&grads, &tracked_vars(&b)) {
        warn!("non-finite parameter gradient at t={t}; step skipped");
        report.skipped = true;
        return Ok(report);
    }
    state.apply(&b, &grads, cfg.train_geometry)?;
    Ok(report)
}
