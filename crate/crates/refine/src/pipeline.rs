//! Coarse mesh in, refined colored mesh out.

use log::info;
use serde::{Deserialize, Serialize};
use trigen_core::{Tape, Tensor};
use trigen_stage1::diffusion::NoiseSchedule;
use trigen_stage1::{Camera, Image, SharedDecoder, TriPlane};

use crate::error::{RefineError, Result};
use crate::hashgrid::{HashGridConfig, HashGridTexture};
use crate::marching::marching_cubes;
use crate::mesh::{decimate, remove_floaters, smooth, Mesh, SmoothConfig};
use crate::raster::image_to_chw;
use crate::score::{PoolCodec, ScoreModel, ViewAnalyticPrior};
use crate::sdf::{mesh_to_sdf, SdfGrid, DESK_RESOLUTION, PAPER_RESOLUTION};
use crate::sds::{sds_latent_step, sds_pixel_step, texture_distill_init, LearningRates, Prompts, RefineState, SdsConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub sdf_resolution: usize,
    /// Side of every refinement render; the stage-one views must match.
    pub render_size: usize,
    pub hash: HashGridConfig,
    pub lr: LearningRates,
    pub sds: SdsConfig,
    pub distill_iters: usize,
    pub latent_iters: usize,
    pub pixel_iters: usize,
    pub skip_latent: bool,
    pub max_faces: usize,
    pub smooth: SmoothConfig,
    pub positive_suffix: String,
    pub negative_prompt: String,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            sdf_resolution: DESK_RESOLUTION,
            render_size: 128,
            hash: HashGridConfig::default(),
            lr: LearningRates::default(),
            sds: SdsConfig::default(),
            distill_iters: 512,
            latent_iters: 800,
            pixel_iters: 400,
            skip_latent: false,
            max_faces: 5_000,
            smooth: SmoothConfig::default(),
            positive_suffix: crate::sds::POSITIVE_SUFFIX.to_string(),
            negative_prompt: crate::sds::NEGATIVE_PROMPT.to_string(),
            seed: 0,
        }
    }
}

impl RefineConfig {
    /// Resolutions and face budget of the full-scale setting.
    pub fn paper() -> Self {
        Self {
            sdf_resolution: PAPER_RESOLUTION,
            render_size: 512,
            max_faces: 50_000,
            ..Self::default()
        }
    }

    pub fn prompts(&self, base: &str) -> Prompts {
        Prompts {
            positive_suffix: self.positive_suffix.clone(),
            negative: self.negative_prompt.clone(),
            ..Prompts::new(base)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub distill_loss: f32,
    pub latent_steps: usize,
    pub latent_skipped: usize,
    pub pixel_steps: usize,
    pub pixel_skipped: usize,
    pub faces_before_decimation: usize,
    pub faces: usize,
    pub euler_characteristic: i64,
}

pub struct RefineOutput {
    /// Decimated, smoothed mesh with baked vertex colors.
    pub mesh: Mesh,
    pub state: RefineState,
    pub report: RefineReport,
}

/// The two priors of the distillation phases.
pub struct Priors<'a> {
    pub latent: Option<&'a dyn ScoreModel>,
    pub pixel: &'a dyn ScoreModel,
}

/// Runs floater removal, SDF conversion, texture distillation, the latent
/// and pixel distillation phases and post-processing. Errors carry the name
/// of the failing stage.
pub fn refine_pipeline(
    mesh: &Mesh,
    stage1_views: &[(Camera, Image)],
    prompt: &str,
    cfg: &RefineConfig,
    priors: &Priors<'_>,
) -> Result<RefineOutput> {
    if let Some((cam, _)) = stage1_views.iter().find(|(c, _)| c.width != cfg.render_size || c.height != cfg.render_size) {
        return Err(RefineError::Config(format!(
            "view is {}×{}, render size is {}",
            cam.width, cam.height, cfg.render_size
        ))
        .in_stage("texture_distill"));
    }
    let cleaned = remove_floaters(mesh);
    if cleaned.is_empty() {
        return Err(RefineError::Mesh("input mesh has no faces".into()).in_stage("remove_floaters"));
    }
    let grid = mesh_to_sdf(&cleaned, cfg.sdf_resolution).map_err(|e| e.in_stage("mesh_to_sdf"))?;
    if !grid.has_zero_crossing() {
        return Err(RefineError::Mesh("SDF grid has no surface".into()).in_stage("mesh_to_sdf"));
    }
    let texture = HashGridTexture::new(cfg.hash.clone(), grid.min, grid.max, cfg.seed).map_err(|e| e.in_stage("texture_init"))?;
    let mut state = RefineState::new(grid, texture, cfg.lr);
    let mut report = RefineReport {
        distill_loss: texture_distill_init(&mut state, stage1_views, cfg.distill_iters, cfg.seed)
            .map_err(|e| e.in_stage("texture_distill"))?,
        ..Default::default()
    };
    info!("texture distillation loss {:.5}", report.distill_loss);

    let prompts = cfg.prompts(prompt);
    let cameras: Vec<Camera> = stage1_views.iter().map(|(c, _)| *c).collect();
    if !cfg.skip_latent && cfg.latent_iters > 0 {
        let prior = priors
            .latent
            .ok_or_else(|| RefineError::Config("latent phase requested without a latent prior".into()).in_stage("latent_sds"))?;
        for _ in 0..cfg.latent_iters {
            let r = sds_latent_step(&mut state, prior, &prompts, &cfg.sds, &cameras, cfg.seed).map_err(|e| e.in_stage("latent_sds"))?;
            report.latent_steps += 1;
            report.latent_skipped += r.skipped as usize;
        }
    }
    state.snapshot_coarse();
    for _ in 0..cfg.pixel_iters {
        let r = sds_pixel_step(&mut state, priors.pixel, &prompts, &cfg.sds, &cameras, cfg.seed).map_err(|e| e.in_stage("pixel_sds"))?;
        report.pixel_steps += 1;
        report.pixel_skipped += r.skipped as usize;
    }

    let out = postprocess(&state, cfg).map_err(|e| e.in_stage("postprocess"))?;
    report.faces_before_decimation = state.mesh().num_faces();
    report.faces = out.num_faces();
    report.euler_characteristic = out.euler_characteristic();
    Ok(RefineOutput { mesh: out, state, report })
}

/// Extract, decimate to the face budget, smooth and bake texture colors.
pub fn postprocess(state: &RefineState, cfg: &RefineConfig) -> Result<Mesh> {
    let mesh = state.mesh();
    if mesh.is_empty() {
        return Err(RefineError::Mesh("refined surface is empty".into()));
    }
    let mut mesh = smooth(&decimate(&mesh, cfg.max_faces), &cfg.smooth);
    mesh.colors = Some(state.texture.lookup(&mesh.vertices)?);
    Ok(mesh)
}

/// Analytic priors centred on the stage-one renders: the latent prior
/// works through a briefly trained pooling codec.
pub struct AnalyticPriors {
    pub latent: ViewAnalyticPrior,
    pub pixel: ViewAnalyticPrior,
}

impl AnalyticPriors {
    pub fn from_views(views: &[(Camera, Image)], codec_steps: usize, seed: u64) -> Result<Self> {
        let targets: Vec<(Camera, Tensor)> = views.iter().map(|(c, img)| (*c, image_to_chw(img))).collect();
        let mut codec = PoolCodec::new(seed);
        let images: Vec<Tensor> = targets.iter().map(|(_, t)| t.clone()).collect();
        if codec_steps > 0 {
            let loss = codec.train(&images, codec_steps, 1e-2)?;
            info!("codec reconstruction loss {loss:.5}");
        }
        let sched = NoiseSchedule::default_linear();
        Ok(Self {
            latent: ViewAnalyticPrior::latent(targets.clone(), 0.0, sched.clone(), Box::new(codec))?,
            pixel: ViewAnalyticPrior::pixel(targets, 0.0, sched)?,
        })
    }

    pub fn priors(&self) -> Priors<'_> {
        Priors {
            latent: Some(&self.latent),
            pixel: &self.pixel,
        }
    }
}

/// Thresholds the decoded density on a lattice over the unit cube and
/// extracts the iso-surface, keeping the largest component.
pub fn triplane_to_mesh(tp: &TriPlane, dec: &SharedDecoder, resolution: usize, threshold: f32) -> Result<Mesh> {
    let n = resolution;
    if n < 2 {
        return Err(RefineError::Config(format!("lattice resolution {n}")));
    }
    let probe = SdfGrid::from_fn(n, [-1.0; 3], [1.0; 3], |_| 0.0)?;
    let pts: Vec<f32> = (0..n * n * n).flat_map(|i| probe.point_of(i)).collect();
    let mut sigma = Vec::with_capacity(n * n * n);
    for chunk in pts.chunks(3 * 4096) {
        let mut tape = Tape::new();
        let params = dec.bind(&mut tape, false);
        let planes = tp.bind(&mut tape, false);
        let xyz = Tensor::new(&[chunk.len() / 3, 3], chunk.to_vec())?;
        let (_, s) = dec.decode(&mut tape, &params, &planes, &xyz)?;
        sigma.extend_from_slice(tape.value(s).data());
    }
    let mut grid = probe;
    grid.values = Tensor::new(&[n * n * n], sigma.iter().map(|s| threshold - s).collect())?;
    // Close the surface at the lattice boundary.
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if [i, j, k].iter().any(|&c| c == 0 || c == n - 1) {
                    let idx = grid.index(i, j, k);
                    grid.values.data_mut()[idx] = grid.values.data()[idx].abs().max(1e-3);
                }
            }
        }
    }
    let mesh = remove_floaters(&marching_cubes(&grid));
    if mesh.is_empty() {
        return Err(RefineError::Mesh(format!("no density above {threshold}")));
    }
    Ok(mesh)
}
