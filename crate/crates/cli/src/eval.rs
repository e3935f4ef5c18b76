//! JSON evaluation report over an artifact directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use trigen_stage1::diffusion::Denoiser;
use trigen_stage1::vae::{LatentStats, TriplaneVae};

use crate::config::PipelineConfig;
use crate::stages::{load_latents, resolve_prompt, sample_triplane, tensor_sha256, FitReport, SampleReport, Stage, VaeReport};

/// Top-level keys of the report, in order.
pub const REPORT_KEYS: [&str; 9] = [
    "fit_psnr",
    "fit_psnr_mean",
    "vae_psnr",
    "vae_psnr_mean",
    "vae_psnr_threshold_db",
    "vae_psnr_pass",
    "latent_stats",
    "sample_latent_sha256",
    "sampling_deterministic",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub fit_psnr: BTreeMap<String, f32>,
    pub fit_psnr_mean: f32,
    pub vae_psnr: BTreeMap<String, f32>,
    pub vae_psnr_mean: f32,
    pub vae_psnr_threshold_db: f32,
    pub vae_psnr_pass: bool,
    pub latent_stats: LatentStats,
    pub sample_latent_sha256: String,
    /// Redrawing with the same seed reproduced the recorded latent hash.
    pub sampling_deterministic: bool,
}

fn mean(m: &BTreeMap<String, f32>) -> f32 {
    if m.is_empty() {
        return f32::NAN;
    }
    m.values().sum::<f32>() / m.len() as f32
}

/// Files the report reads, relative to the artifact root.
pub fn required_files() -> Vec<PathBuf> {
    [
        (Stage::Fit, "fit.json"),
        (Stage::TrainVae, "vae_report.json"),
        (Stage::TrainVae, "stats.json"),
        (Stage::TrainVae, "vae.ttns"),
        (Stage::TrainLdm, "denoiser.ttns"),
        (Stage::Sample, "sample.json"),
    ]
    .iter()
    .map(|(s, f)| Path::new(s.name()).join(f))
    .collect()
}

pub fn evaluate(cfg: &PipelineConfig, root: &Path) -> Result<EvalReport> {
    let missing: Vec<String> = required_files()
        .into_iter()
        .filter(|f| !root.join(f).exists())
        .map(|f| f.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing artifacts: {}", missing.join(", "));
    }
    let read = |p: PathBuf| -> Result<String> { Ok(std::fs::read_to_string(root.join(p))?) };
    let fit: FitReport = serde_json::from_str(&read(Path::new(Stage::Fit.name()).join("fit.json"))?)?;
    let vae_report: VaeReport = serde_json::from_str(&read(Path::new(Stage::TrainVae.name()).join("vae_report.json"))?)?;
    let sample: SampleReport = serde_json::from_str(&read(Path::new(Stage::Sample.name()).join("sample.json"))?)?;
    let (_, latents, _, stats) = load_latents(root)?;

    let vae = TriplaneVae::load(root.join(Stage::TrainVae.name()).join("vae.ttns"))?;
    let denoiser = Denoiser::load(root.join(Stage::TrainLdm.name()).join("denoiser.ttns"))?;
    let prompt = resolve_prompt(cfg, root)?;
    let (z, _) = sample_triplane(cfg, &denoiser, &vae, &stats, latents[0].shape(), &prompt, cfg.sample.seed ^ cfg.seed)?;

    let vae_psnr_mean = mean(&vae_report.psnr);
    Ok(EvalReport {
        fit_psnr_mean: mean(&fit.psnr),
        fit_psnr: fit.psnr,
        vae_psnr_mean,
        vae_psnr: vae_report.psnr,
        vae_psnr_threshold_db: cfg.eval.vae_psnr_threshold_db,
        vae_psnr_pass: vae_psnr_mean >= cfg.eval.vae_psnr_threshold_db,
        latent_stats: stats,
        sampling_deterministic: tensor_sha256(&z) == sample.latent_sha256,
        sample_latent_sha256: sample.latent_sha256,
    })
}
