use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use trigen_caption::{
    dataset_statistics, jobs_from_manifest, read_records, run_pipeline, FewShot, HttpProvider, MockProvider, PipelineOptions,
    Providers, ProvidersConfig, RetryPolicy,
};
use trigen_cli::stages::{orbit_views, refine_mesh};
use trigen_cli::{evaluate, plan, run_stage, run_through, ArtifactStore, PipelineConfig, Stage, StageOutcome};
use trigen_refine::raster::render_vertex_colors;
use trigen_refine::Mesh;
use trigen_stage1::synthdata::DatasetManifest;

#[derive(Parser)]
#[command(name = "trigen", version, about = "Two-stage text-to-3D pipeline at desk scale")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file of `dotted.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Override one configuration key, e.g. `--set fit.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Artifact directory, overriding `artifact_dir`.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural dataset.
    Dataset,
    /// Fit the shared decoder and one tri-plane per object.
    Fit,
    /// Train the tri-plane VAE and encode the training latents.
    TrainVae,
    /// Train the conditional latent denoiser.
    TrainLdm,
    /// Sample a tri-plane for the prompt and extract the coarse mesh.
    Sample {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Refine the sampled mesh, or a given OBJ with --mesh.
    Refine(RefineArgs),
    /// Caption multi-view renders with the three-stage language pipeline.
    Caption(CaptionArgs),
    /// Write the JSON evaluation report.
    Eval {
        /// Report path; defaults to `<artifacts>/eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage from dataset to refinement.
    E2e {
        /// Print the stage plan and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Args)]
struct RefineArgs {
    /// Refine this OBJ instead of the sampled mesh; views are rendered from
    /// its vertex colors.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    latent_iters: Option<usize>,
    #[arg(long)]
    pixel_iters: Option<usize>,
    #[arg(long)]
    skip_latent: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for --mesh runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CaptionArgs {
    /// Dataset manifest; defaults to the artifact dataset.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON provider configuration with caption, simplify and fuse entries.
    #[arg(long, required_unless_present = "mock", conflicts_with = "mock")]
    provider_config: Option<PathBuf>,
    /// Output JSONL; defaults to `<artifacts>/captions/captions.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep existing records and skip objects already fused.
    #[arg(long)]
    resume: bool,
    /// Use the offline mock provider for every stage.
    #[arg(long)]
    mock: bool,
    /// Append every request and response to this JSONL file.
    #[arg(long)]
    request_log: Option<PathBuf>,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let base = match (&g.config, &g.profile) {
        (Some(_), Some(_)) => bail!("--config and --profile are mutually exclusive"),
        (Some(path), None) => PipelineConfig::load(path)?,
        (None, Some(p)) => PipelineConfig::profile(p)?,
        (None, None) => PipelineConfig::desk(),
    };
    let mut cfg = base.with_assignments(&g.sets)?;
    if let Some(dir) = &g.artifacts {
        cfg.artifact_dir = dir.display().to_string();
    }
    Ok(cfg)
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        let status = if o.cached { "cached".to_string() } else { format!("{:.1}s", o.seconds) };
        println!("{:<10} {:<8} {}", o.stage.name(), status, &o.record.hash[..16]);
    }
}

fn single(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    let mut store = ArtifactStore::open(&cfg.artifact_dir)?;
    report(&[run_stage(cfg, &mut store, stage)?]);
    Ok(())
}

fn refine(mut cfg: PipelineConfig, a: RefineArgs) -> Result<()> {
    let s = &mut cfg.refine.settings;
    if let Some(n) = a.latent_iters {
        s.latent_iters = n;
    }
    if let Some(n) = a.pixel_iters {
        s.pixel_iters = n;
    }
    s.skip_latent |= a.skip_latent;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    let Some(mesh_path) = a.mesh else {
        if a.prompt.is_some() || a.out.is_some() {
            bail!("--prompt and --out apply to --mesh runs; the stage uses the sampled prompt");
        }
        return single(&cfg, Stage::Refine);
    };
    let prompt = a.prompt.context("--mesh needs --prompt")?;
    let out = a.out.unwrap_or_else(|| Path::new(&cfg.artifact_dir).join("refine-mesh"));
    let mesh = Mesh::load_obj(&mesh_path).with_context(|| format!("loading {}", mesh_path.display()))?;
    let colors = mesh.colors.clone().unwrap_or_else(|| vec![[0.7; 3]; mesh.vertices.len()]);
    let views = orbit_views(cfg.sample.views, cfg.refine.settings.render_size)?
        .into_iter()
        .map(|cam| Ok((cam, render_vertex_colors(&mesh.vertices, &mesh.faces, &colors, &cam)?)))
        .collect::<Result<Vec<_>>>()?;
    refine_mesh(&cfg, &mesh, &views, &prompt, &out)?;
    println!("{}", out.join("refined.obj").display());
    Ok(())
}

fn caption(cfg: &PipelineConfig, a: CaptionArgs) -> Result<()> {
    let root = PathBuf::from(&cfg.artifact_dir);
    let manifest_path = a.manifest.unwrap_or_else(|| trigen_cli::stages::dataset_dir(&root).join("manifest.jsonl"));
    let manifest = DatasetManifest::read(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let images_root = manifest_path.parent().unwrap_or(Path::new("."));
    let jobs = jobs_from_manifest(&manifest, images_root);
    let (providers, workers) = if a.mock {
        (Providers::uniform(Arc::new(MockProvider::new())), cfg.caption.workers)
    } else {
        let pc = ProvidersConfig::load(a.provider_config.as_ref().expect("clap enforces one of the two"))?;
        let workers = pc.caption.concurrency;
        let providers = Providers {
            caption: Arc::new(HttpProvider::new(pc.caption)?),
            simplify: Arc::new(HttpProvider::new(pc.simplify)?),
            fuse: Arc::new(HttpProvider::new(pc.fuse)?),
        };
        (providers, workers)
    };
    let out = a.out.unwrap_or_else(|| root.join("captions").join("captions.jsonl"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let opts = PipelineOptions {
        workers,
        retry: RetryPolicy {
            max_retries: cfg.caption.max_retries,
            base_delay_ms: cfg.caption.base_delay_ms,
            max_delay_ms: cfg.caption.max_delay_ms,
        },
        few_shot: FewShot::bundled(),
        request_log: a.request_log,
        resume: a.resume,
    };
    let stats = run_pipeline(&jobs, providers, &out, &opts)?;
    let ds = dataset_statistics(&read_records(&out)?);
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "stats": stats, "dataset": ds }))?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if cli.global.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    match cli.command {
        Command::Dataset => single(&cfg, Stage::Dataset),
        Command::Fit => single(&cfg, Stage::Fit),
        Command::TrainVae => single(&cfg, Stage::TrainVae),
        Command::TrainLdm => single(&cfg, Stage::TrainLdm),
        Command::Sample { prompt, seed } => {
            let mut cfg = cfg;
            if let Some(p) = prompt {
                cfg.sample.prompt = p;
            }
            if let Some(s) = seed {
                cfg.sample.seed = s;
            }
            single(&cfg, Stage::Sample)
        }
        Command::Refine(a) => refine(cfg, a),
        Command::Caption(a) => caption(&cfg, a),
        Command::Eval { out } => {
            let root = PathBuf::from(&cfg.artifact_dir);
            let report = evaluate(&cfg, &root)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            std::fs::write(out.unwrap_or_else(|| root.join("eval.json")), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::E2e { dry_run } => {
            if dry_run {
                println!("profile {} → {}", cfg.profile, cfg.artifact_dir);
                for line in plan(&cfg, Stage::Refine) {
                    println!("{line}");
                }
                return Ok(());
            }
            let mut store = ArtifactStore::open(&cfg.artifact_dir)?;
            let outcomes = run_through(&cfg, &mut store, Stage::Refine)?;
            report(&outcomes);
            println!("{}", store.stage_dir(Stage::Refine.name()).join("refined.obj").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
