//! Pipeline configuration and its flat `dotted.key = <json value>` text form.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use trigen_refine::RefineConfig;
use trigen_stage1::diffusion::{LdmConfig, NoiseSchedule, BETA_END, BETA_START, DDIM_STEPS, DEFAULT_STEPS, GUIDANCE};
use trigen_stage1::fitting::FitConfig;
use trigen_stage1::synthdata::DatasetConfig;
use trigen_stage1::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// SNR shift; 1 is the plain linear schedule.
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: BETA_START,
            beta_end: BETA_END,
            shift: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.shift)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Empty means the caption of the first training object.
    pub prompt: String,
    pub ddim_steps: usize,
    pub guidance: f32,
    pub seed: u64,
    /// Orbit renders of the sample handed to refinement, drawn at
    /// `refine.settings.render_size`.
    pub views: usize,
    pub mesh_resolution: usize,
    pub density_threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStage {
    pub settings: RefineConfig,
    /// Training steps of the pooling codec behind the latent prior.
    pub codec_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionStage {
    pub workers: usize,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub psnr_samples: usize,
    pub vae_psnr_threshold_db: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: String,
    pub seed: u64,
    /// Root of every stage's outputs.
    pub artifact_dir: String,
    pub dataset: DatasetConfig,
    pub fit: FitConfig,
    pub vae: VaeConfig,
    pub schedule: ScheduleConfig,
    pub ldm: LdmConfig,
    pub sample: SampleConfig,
    pub refine: RefineStage,
    pub caption: CaptionStage,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Small enough to run end to end on a laptop CPU.
    pub fn desk() -> Self {
        let mut fit = FitConfig {
            steps: 500,
            n_samples: 24,
            rays_per_batch: 256,
            ..FitConfig::default()
        };
        fit.triplane.resolution = 32;
        fit.decoder.hidden = 32;
        let vae = VaeConfig {
            steps: 500,
            lr: 2e-3,
            ..VaeConfig::default()
        };
        let ldm = LdmConfig {
            steps: 4000,
            lr: 2e-3,
            ..LdmConfig::default()
        };
        let refine = RefineConfig {
            render_size: 64,
            distill_iters: 200,
            ..RefineConfig::default()
        };
        Self {
            profile: "desk".into(),
            seed: 0,
            artifact_dir: "artifacts".into(),
            dataset: DatasetConfig {
                n_objects: 4,
                n_views: 10,
                resolution: 32,
                seed: 0,
            },
            fit,
            vae,
            schedule: ScheduleConfig::default(),
            ldm,
            sample: SampleConfig {
                prompt: String::new(),
                ddim_steps: 50,
                guidance: GUIDANCE,
                seed: 0,
                views: 8,
                mesh_resolution: 32,
                density_threshold: 5.0,
            },
            refine: RefineStage {
                settings: refine,
                codec_steps: 100,
            },
            caption: CaptionStage {
                workers: 4,
                max_retries: 3,
                base_delay_ms: 500,
                max_delay_ms: 8_000,
            },
            eval: EvalConfig {
                psnr_samples: 48,
                vae_psnr_threshold_db: 26.0,
            },
        }
    }

    /// Full-scale resolutions and step counts. Valid, but far beyond a CPU.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = "paper".into();
        c.dataset.resolution = 512;
        c.fit.triplane.resolution = 256;
        c.fit.steps = 100_000;
        c.vae.steps = 100_000;
        c.ldm.steps = 100_000;
        c.sample.ddim_steps = DDIM_STEPS;
        c.sample.mesh_resolution = 128;
        c.refine.settings = RefineConfig::paper();
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => bail!("unknown profile {other:?} (expected desk or paper)"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# trigen pipeline configuration\n");
        for (k, v) in flatten(&to_value(self)) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses `text` over the defaults of its `profile` key (desk when
    /// absent). Unknown and duplicate keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let key = k.trim().to_string();
            let value: Value = serde_json::from_str(v.trim()).with_context(|| format!("line {}: value of {key}", n + 1))?;
            if entries.insert(key.clone(), value).is_some() {
                bail!("line {}: duplicate key {key}", n + 1);
            }
        }
        let profile = match entries.get("profile") {
            Some(Value::String(p)) => p.clone(),
            Some(other) => bail!("profile must be a string, got {other}"),
            None => "desk".into(),
        };
        let base = Self::profile(&profile)?;
        base.with_overrides(entries)
    }

    /// Applies dotted-key overrides.
    pub fn with_overrides(&self, entries: BTreeMap<String, Value>) -> Result<Self> {
        let mut tree = to_value(self);
        let known: BTreeMap<String, Value> = flatten(&tree).into_iter().collect();
        for (key, value) in entries {
            if !known.contains_key(&key) {
                bail!("unknown configuration key {key:?}");
            }
            set_path(&mut tree, &key, value);
        }
        let cfg: Self = serde_json::from_value(tree).context("configuration values")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key=value` pairs, the value being JSON or, failing that, a
    /// bare string.
    pub fn with_assignments(&self, pairs: &[String]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got {p:?}"))?;
            let v = v.trim();
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            entries.insert(k.trim().to_string(), value);
        }
        self.with_overrides(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.schedule.build()?;
        if self.dataset.n_objects < 2 {
            bail!("dataset.n_objects must be at least 2");
        }
        if self.sample.views < 4 {
            bail!("sample.views must be at least 4");
        }
        if self.caption.workers == 0 {
            bail!("caption.workers must be at least 1");
        }
        Ok(())
    }

    /// Hash of the keys under `prefixes` plus the global seed.
    pub fn section_hash(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in flatten(&to_value(self)) {
            if k == "seed" || prefixes.iter().any(|p| k == *p || k.starts_with(&format!("{p}."))) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }
}

/// Through the string form, so `f32` fields keep their short spelling.
fn to_value(cfg: &PipelineConfig) -> Value {
    serde_json::from_str(&serde_json::to_string(cfg).expect("serializable")).expect("valid json")
}

/// Externally tagged enum values (`{"Variant": ...}`) stay whole.
fn is_enum_value(m: &Map<String, Value>) -> bool {
    m.len() == 1 && m.keys().next().is_some_and(|k| k.starts_with(|c: char| c.is_ascii_uppercase()))
}

fn flatten(v: &Value) -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(m) if !m.is_empty() && !is_enum_value(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

fn set_path(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node.get_mut(*p).expect("known key");
    }
    node[parts[parts.len() - 1]] = value;
}
