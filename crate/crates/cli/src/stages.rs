//! The pipeline stages over an artifact store, with caching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trigen_core::io::{encode_tensor, load_tensor, save_tensor};
use trigen_core::Tensor;
use trigen_refine::{refine_pipeline, triplane_to_mesh, AnalyticPriors, Mesh};
use trigen_stage1::diffusion::{ddim_sample, embed_caption, train_ldm, Denoiser};
use trigen_stage1::fitting::{evaluate_psnr, train_shared_decoder, MultiViewSample};
use trigen_stage1::render::render_image;
use trigen_stage1::synthdata::{build_manifest, DatasetManifest, MANIFEST_FILE};
use trigen_stage1::vae::{compute_latent_stats, denormalize, normalize, rollout, train_vae, unroll, LatentStats, TriplaneVae};
use trigen_stage1::{Camera, Image, SharedDecoder, TriPlane};

use crate::artifacts::{ArtifactRecord, ArtifactStore};
use crate::config::PipelineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Dataset,
    Fit,
    TrainVae,
    TrainLdm,
    Sample,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Dataset,
        Stage::Fit,
        Stage::TrainVae,
        Stage::TrainLdm,
        Stage::Sample,
        Stage::Refine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Fit => "fit",
            Stage::TrainVae => "train-vae",
            Stage::TrainLdm => "train-ldm",
            Stage::Sample => "sample",
            Stage::Refine => "refine",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Dataset => &[],
            Stage::Fit => &[Stage::Dataset],
            Stage::TrainVae => &[Stage::Dataset, Stage::Fit],
            Stage::TrainLdm => &[Stage::TrainVae],
            Stage::Sample => &[Stage::Fit, Stage::TrainVae, Stage::TrainLdm],
            Stage::Refine => &[Stage::Sample],
        }
    }

    /// Configuration sections the stage's outputs depend on.
    fn config_sections(self) -> &'static [&'static str] {
        match self {
            Stage::Dataset => &["dataset"],
            Stage::Fit => &["fit"],
            Stage::TrainVae => &["vae"],
            Stage::TrainLdm => &["schedule", "ldm"],
            Stage::Sample => &["schedule", "sample", "refine.settings.render_size"],
            Stage::Refine => &["refine"],
        }
    }

    fn summary(self, cfg: &PipelineConfig) -> String {
        match self {
            Stage::Dataset => format!(
                "{} objects × {} views at {}²",
                cfg.dataset.n_objects, cfg.dataset.n_views, cfg.dataset.resolution
            ),
            Stage::Fit => format!("{} shared-decoder steps, {}² planes", cfg.fit.steps, cfg.fit.triplane.resolution),
            Stage::TrainVae => format!("{} steps", cfg.vae.steps),
            Stage::TrainLdm => format!("{} steps, T = {}", cfg.ldm.steps, cfg.schedule.steps),
            Stage::Sample => format!(
                "{} DDIM steps, guidance {}, {}³ mesh lattice",
                cfg.sample.ddim_steps, cfg.sample.guidance, cfg.sample.mesh_resolution
            ),
            Stage::Refine => format!(
                "{}³ SDF, {}/{} latent/pixel iterations, ≤ {} faces",
                cfg.refine.settings.sdf_resolution,
                if cfg.refine.settings.skip_latent { 0 } else { cfg.refine.settings.latent_iters },
                cfg.refine.settings.pixel_iters,
                cfg.refine.settings.max_faces
            ),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub record: ArtifactRecord,
    pub cached: bool,
    pub seconds: f64,
}

/// The stages up to and including `last`, one line each.
pub fn plan(cfg: &PipelineConfig, last: Stage) -> Vec<String> {
    Stage::ALL
        .iter()
        .filter(|s| **s <= last)
        .enumerate()
        .map(|(i, s)| format!("{}. {:<10} {}", i + 1, s.name(), s.summary(cfg)))
        .collect()
}

/// Runs `stage` unless a cached artifact with the same inputs exists.
/// Upstream stages must already be committed.
pub fn run_stage(cfg: &PipelineConfig, store: &mut ArtifactStore, stage: Stage) -> Result<StageOutcome> {
    let mut upstream = BTreeMap::new();
    for up in stage.upstream() {
        let rec = store
            .get(up.name())
            .ok_or_else(|| anyhow!("{stage} needs the output of {up}; run `{up}` first"))?;
        upstream.insert(up.name().to_string(), rec.hash.clone());
    }
    let config_hash = cfg.section_hash(stage.config_sections());
    if let Some(rec) = store.cached(stage.name(), &config_hash, &upstream) {
        log::info!("{stage}: cached ({})", &rec.hash[..12]);
        return Ok(StageOutcome {
            stage,
            record: rec.clone(),
            cached: true,
            seconds: 0.0,
        });
    }
    store.invalidate(stage.name())?;
    let dir = store.stage_dir(stage.name());
    fs::create_dir_all(&dir)?;
    let start = Instant::now();
    let root = store.root.clone();
    match stage {
        Stage::Dataset => dataset(cfg, &dir),
        Stage::Fit => fit(cfg, &root, &dir),
        Stage::TrainVae => vae(cfg, &root, &dir),
        Stage::TrainLdm => ldm(cfg, &root, &dir),
        Stage::Sample => sample(cfg, &root, &dir),
        Stage::Refine => refine(cfg, &root, &dir),
    }
    .with_context(|| format!("stage {stage} failed"))?;
    let record = store.commit(stage.name(), &config_hash, upstream)?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!("{stage}: done in {seconds:.1}s ({})", &record.hash[..12]);
    Ok(StageOutcome {
        stage,
        record,
        cached: false,
        seconds,
    })
}

/// Runs every stage through `last` in order, stopping at the first failure.
pub fn run_through(cfg: &PipelineConfig, store: &mut ArtifactStore, last: Stage) -> Result<Vec<StageOutcome>> {
    let mut out = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        out.push(run_stage(cfg, store, stage)?);
    }
    Ok(out)
}

fn write_json(path: impl AsRef<Path>, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn dataset_dir(root: &Path) -> PathBuf {
    root.join(Stage::Dataset.name())
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::read(dataset_dir(root).join(MANIFEST_FILE))?)
}

fn load_samples(root: &Path) -> Result<Vec<MultiViewSample>> {
    Ok(load_manifest(root)?.load_samples(dataset_dir(root))?)
}

fn dataset(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let mut d = cfg.dataset;
    d.seed ^= cfg.seed;
    build_manifest(&d, dir)?;
    Ok(())
}

/// Per-object fitting results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub psnr: BTreeMap<String, f32>,
    pub final_loss: f32,
}

pub fn load_decoder(root: &Path) -> Result<SharedDecoder> {
    Ok(SharedDecoder::load(root.join(Stage::Fit.name()).join("decoder.ttns"))?)
}

pub fn load_triplanes(root: &Path) -> Result<Vec<(String, TriPlane)>> {
    let dir = root.join(Stage::Fit.name()).join("triplanes");
    load_manifest(root)?
        .rows
        .iter()
        .map(|r| Ok((r.id.clone(), TriPlane::load(dir.join(format!("{}.ttns", r.id)))?)))
        .collect()
}

fn fit(cfg: &PipelineConfig, root: &Path, dir: &Path) -> Result<()> {
    let samples = load_samples(root)?;
    let mut fc = cfg.fit.clone();
    fc.seed ^= cfg.seed;
    let run = train_shared_decoder(&samples, &fc)?;
    run.decoder.save(dir.join("decoder.ttns"))?;
    fs::create_dir_all(dir.join("triplanes"))?;
    let mut psnr = BTreeMap::new();
    for (s, tp) in samples.iter().zip(&run.triplanes) {
        tp.save(dir.join("triplanes").join(format!("{}.ttns", s.id)))?;
        psnr.insert(s.id.clone(), evaluate_psnr(tp, &run.decoder, s, cfg.eval.psnr_samples)?);
    }
    let report = FitReport {
        psnr,
        final_loss: run.losses.last().copied().unwrap_or(f32::NAN),
    };
    write_json(dir.join("fit.json"), &report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    /// Render PSNR of the reconstructed tri-plane against ground truth.
    pub psnr: BTreeMap<String, f32>,
    pub final_loss: f32,
}

fn vae(cfg: &PipelineConfig, root: &Path, dir: &Path) -> Result<()> {
    let samples = load_samples(root)?;
    let planes = load_triplanes(root)?;
    let decoder = load_decoder(root)?;
    let mut vc = cfg.vae.clone();
    vc.seed ^= cfg.seed;
    vc.in_channels = planes[0].1.channels();
    vc.color_channels = planes[0].1.color_channels();
    let data: Vec<TriPlane> = planes.iter().map(|(_, tp)| tp.clone()).collect();
    let run = train_vae(&data, &vc)?;
    run.vae.save(dir.join("vae.ttns"))?;
    fs::create_dir_all(dir.join("latents"))?;
    let mut latents = Vec::new();
    let mut psnr = BTreeMap::new();
    for ((id, tp), s) in planes.iter().zip(&samples) {
        let z = run.vae.encode(&rollout(tp))?.mu;
        save_tensor(dir.join("latents").join(format!("{id}.ttns")), &z)?;
        latents.push(z);
        let rec = run.vae.reconstruct(tp)?;
        psnr.insert(id.clone(), evaluate_psnr(&rec, &decoder, s, cfg.eval.psnr_samples)?);
    }
    write_json(dir.join("stats.json"), &compute_latent_stats(&latents)?)?;
    let captions: BTreeMap<String, String> = load_manifest(root)?.rows.into_iter().map(|r| (r.id, r.caption)).collect();
    write_json(dir.join("captions.json"), &captions)?;
    write_json(
        dir.join("vae_report.json"),
        &VaeReport {
            psnr,
            final_loss: run.losses.last().copied().unwrap_or(f32::NAN),
        },
    )
}

/// Object ids, encoded latents, captions and latent statistics.
pub type TrainingLatents = (Vec<String>, Vec<Tensor>, Vec<String>, LatentStats);

pub fn load_latents(root: &Path) -> Result<TrainingLatents> {
    let dir = root.join(Stage::TrainVae.name());
    let captions: BTreeMap<String, String> = read_json(dir.join("captions.json"))?;
    let stats: LatentStats = read_json(dir.join("stats.json"))?;
    let mut ids = Vec::new();
    let mut latents = Vec::new();
    let mut caps = Vec::new();
    for (id, cap) in captions {
        latents.push(load_tensor(dir.join("latents").join(format!("{id}.ttns")))?);
        ids.push(id);
        caps.push(cap);
    }
    Ok((ids, latents, caps, stats))
}

fn ldm(cfg: &PipelineConfig, root: &Path, dir: &Path) -> Result<()> {
    let (_, latents, captions, stats) = load_latents(root)?;
    let normalized = latents.iter().map(|l| normalize(l, &stats)).collect::<Result<Vec<_>, _>>()?;
    let mut lc = cfg.ldm.clone();
    lc.seed ^= cfg.seed;
    lc.denoiser.latent_channels = normalized[0].shape()[0];
    let run = train_ldm(&normalized, &captions, &cfg.schedule.build()?, &lc)?;
    run.denoiser.save(dir.join("denoiser.ttns"))?;
    write_json(dir.join("losses.json"), &run.losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub prompt: String,
    /// SHA-256 of the sampled (normalized) latent.
    pub latent_sha256: String,
    pub mesh_faces: usize,
    pub views: Vec<Camera>,
}

/// Orbit cameras evenly spaced in azimuth at a fixed elevation.
pub fn orbit_views(n: usize, size: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| Ok(Camera::orbit(i as f32 * 360.0 / n as f32, 15.0, size)?))
        .collect()
}

pub fn tensor_sha256(t: &Tensor) -> String {
    hex::encode(Sha256::digest(encode_tensor(t)))
}

/// The resolved prompt: the configured one, or the first training caption.
pub fn resolve_prompt(cfg: &PipelineConfig, root: &Path) -> Result<String> {
    if !cfg.sample.prompt.trim().is_empty() {
        return Ok(cfg.sample.prompt.clone());
    }
    let (_, _, caps, _) = load_latents(root)?;
    caps.into_iter().next().ok_or_else(|| anyhow!("no training captions"))
}

/// Draws a normalized latent and decodes it to a tri-plane.
pub fn sample_triplane(
    cfg: &PipelineConfig,
    denoiser: &Denoiser,
    vae: &TriplaneVae,
    stats: &LatentStats,
    shape: &[usize],
    prompt: &str,
    seed: u64,
) -> Result<(Tensor, TriPlane)> {
    let sched = cfg.schedule.build()?;
    let z = ddim_sample(denoiser, &embed_caption(prompt), &sched, cfg.sample.ddim_steps, cfg.sample.guidance, seed, shape)?;
    let tp = unroll(&vae.decode(&denormalize(&z, stats)?)?)?;
    Ok((z, tp))
}

fn sample(cfg: &PipelineConfig, root: &Path, dir: &Path) -> Result<()> {
    let (_, latents, _, stats) = load_latents(root)?;
    let vae = TriplaneVae::load(root.join(Stage::TrainVae.name()).join("vae.ttns"))?;
    let denoiser = Denoiser::load(root.join(Stage::TrainLdm.name()).join("denoiser.ttns"))?;
    let decoder = load_decoder(root)?;
    let prompt = resolve_prompt(cfg, root)?;
    let (z, tp) = sample_triplane(cfg, &denoiser, &vae, &stats, latents[0].shape(), &prompt, cfg.sample.seed ^ cfg.seed)?;
    save_tensor(dir.join("latent.ttns"), &z)?;
    tp.save(dir.join("triplane.ttns"))?;
    let cams = orbit_views(cfg.sample.views, cfg.refine.settings.render_size)?;
    fs::create_dir_all(dir.join("views"))?;
    for (i, cam) in cams.iter().enumerate() {
        render_image(&tp, &decoder, cam, cfg.eval.psnr_samples)?.save_png(dir.join("views").join(format!("{i:02}.png")))?;
    }
    let mesh = triplane_to_mesh(&tp, &decoder, cfg.sample.mesh_resolution, cfg.sample.density_threshold)?;
    mesh.save_obj(dir.join("coarse.obj"))?;
    write_json(
        dir.join("sample.json"),
        &SampleReport {
            prompt,
            latent_sha256: tensor_sha256(&z),
            mesh_faces: mesh.num_faces(),
            views: cams,
        },
    )
}

pub fn load_sample_views(root: &Path) -> Result<(SampleReport, Vec<(Camera, Image)>)> {
    let dir = root.join(Stage::Sample.name());
    let report: SampleReport = read_json(dir.join("sample.json"))?;
    let views = report
        .views
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((*c, Image::load_png(dir.join("views").join(format!("{i:02}.png")))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((report, views))
}

fn refine(cfg: &PipelineConfig, root: &Path, dir: &Path) -> Result<()> {
    let (report, views) = load_sample_views(root)?;
    let mesh = Mesh::load_obj(root.join(Stage::Sample.name()).join("coarse.obj"))?;
    refine_mesh(cfg, &mesh, &views, &report.prompt, dir)
}

/// Refines `mesh` against `views` and writes `refined.obj` and `refine.json`.
pub fn refine_mesh(cfg: &PipelineConfig, mesh: &Mesh, views: &[(Camera, Image)], prompt: &str, dir: &Path) -> Result<()> {
    let mut rc = cfg.refine.settings.clone();
    rc.seed ^= cfg.seed;
    let priors = AnalyticPriors::from_views(views, cfg.refine.codec_steps, rc.seed)?;
    let out = refine_pipeline(mesh, views, prompt, &rc, &priors.priors())?;
    if out.mesh.num_faces() > rc.max_faces {
        bail!("refined mesh has {} faces, budget {}", out.mesh.num_faces(), rc.max_faces);
    }
    fs::create_dir_all(dir)?;
    out.mesh.save_obj(dir.join("refined.obj"))?;
    write_json(dir.join("refine.json"), &out.report)
}
