//! Caption, simplify and fuse over a manifest of multi-view renders.
//!
//! Objects are spread over a fixed pool of workers. Finished records go
//! through a channel to a single appender, which writes one JSONL line per
//! object. Failures are recorded per view and never abort the object.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use trigen_stage1::synthdata::DatasetManifest;

use crate::error::{CaptionError, Result};
use crate::log::{LoggedProvider, RequestLog};
use crate::prompts::{caption_request, fuse_request, simplify_request, FewShot};
use crate::provider::{complete_with_retry, Attempted, Provider, RetryPolicy};

pub const MAX_VIEWS: usize = 10;

/// One object to caption: its id and rendered views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionJob {
    pub id: String,
    pub views: Vec<PathBuf>,
}

/// Jobs for every manifest row, image paths resolved against `root` and
/// capped at [`MAX_VIEWS`].
pub fn jobs_from_manifest(manifest: &DatasetManifest, root: impl AsRef<Path>) -> Vec<CaptionJob> {
    let root = root.as_ref();
    manifest
        .rows
        .iter()
        .map(|row| {
            if row.views.len() > MAX_VIEWS {
                log::warn!("{}: using the first {MAX_VIEWS} of {} views", row.id, row.views.len());
            }
            CaptionJob {
                id: row.id.clone(),
                views: row.views.iter().take(MAX_VIEWS).map(|v| root.join(&v.image)).collect(),
            }
        })
        .collect()
}

#[derive(Clone)]
pub struct Providers {
    pub caption: Arc<dyn Provider>,
    pub simplify: Arc<dyn Provider>,
    pub fuse: Arc<dyn Provider>,
}

impl Providers {
    /// The same provider for all three stages.
    pub fn uniform(p: Arc<dyn Provider>) -> Self {
        Self {
            caption: p.clone(),
            simplify: p.clone(),
            fuse: p,
        }
    }

    fn logged(self, log: Arc<RequestLog>) -> Self {
        let wrap = |inner: Arc<dyn Provider>, stage: &str| -> Arc<dyn Provider> {
            Arc::new(LoggedProvider {
                inner,
                log: log.clone(),
                stage: stage.into(),
            })
        };
        Self {
            caption: wrap(self.caption, "caption"),
            simplify: wrap(self.simplify, "simplify"),
            fuse: wrap(self.fuse, "fuse"),
        }
    }

    fn meta(&self) -> ProviderMeta {
        let id = |p: &Arc<dyn Provider>| format!("{}/{}", p.name(), p.model());
        ProviderMeta {
            caption: id(&self.caption),
            simplify: id(&self.simplify),
            fuse: id(&self.fuse),
            pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub workers: usize,
    pub retry: RetryPolicy,
    pub few_shot: FewShot,
    /// Request/response log, appended to.
    pub request_log: Option<PathBuf>,
    /// Keep existing records and skip objects that already have a fused caption.
    pub resume: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            retry: RetryPolicy::default(),
            few_shot: FewShot::bundled(),
            request_log: None,
            resume: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderMeta {
    pub caption: String,
    pub simplify: String,
    pub fuse: String,
    pub pipeline_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCaption {
    pub image: String,
    pub raw: Option<String>,
    pub simplified: Option<String>,
    /// The raw caption was empty, so simplification was not requested.
    #[serde(default)]
    pub empty: bool,
    pub error: Option<String>,
    /// Provider calls spent on this view across both stages.
    pub attempts: u32,
}

/// One JSONL line of the output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub views: Vec<ViewCaption>,
    pub fused: Option<String>,
    pub fuse_error: Option<String>,
    pub providers: ProviderMeta,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

impl CaptionRecord {
    pub fn has_raw(&self) -> bool {
        self.views.iter().any(|v| v.raw.is_some())
    }

    pub fn simplified(&self) -> Vec<String> {
        self.views.iter().filter_map(|v| v.simplified.clone()).filter(|s| !s.trim().is_empty()).collect()
    }

    /// Equal captions, ignoring timestamps and provider metadata.
    pub fn same_content(&self, other: &Self) -> bool {
        self.id == other.id && self.views == other.views && self.fused == other.fused && self.fuse_error == other.fuse_error
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub objects: usize,
    /// Skipped because the output already held a fused record.
    pub resumed: usize,
    pub captioned: usize,
    pub simplified: usize,
    pub fused: usize,
    pub failed: usize,
}

impl PipelineStats {
    fn count(&mut self, r: &CaptionRecord) {
        self.captioned += r.has_raw() as usize;
        self.simplified += !r.simplified().is_empty() as usize;
        if r.fused.is_some() {
            self.fused += 1;
        } else {
            self.failed += 1;
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Sends the captioning prompt with one PNG view.
pub fn caption_view(png: &[u8], provider: &dyn Provider, policy: &RetryPolicy) -> Attempted<String> {
    let req = caption_request(provider.model(), provider.temperature(), png);
    complete_with_retry(provider, &req, policy)
}

/// `None` for an empty raw caption: nothing is sent.
pub fn simplify_caption(raw: &str, provider: &dyn Provider, shots: &FewShot, policy: &RetryPolicy) -> Option<Attempted<String>> {
    if raw.trim().is_empty() {
        return None;
    }
    let req = simplify_request(provider.model(), provider.temperature(), shots, raw);
    Some(complete_with_retry(provider, &req, policy))
}

/// `None` unless at least one caption is non-empty.
pub fn fuse_captions(simplified: &[String], provider: &dyn Provider, shots: &FewShot, policy: &RetryPolicy) -> Option<Attempted<String>> {
    let kept: Vec<String> = simplified.iter().filter(|s| !s.trim().is_empty()).cloned().collect();
    if kept.is_empty() {
        return None;
    }
    let req = fuse_request(provider.model(), provider.temperature(), shots, &kept);
    Some(complete_with_retry(provider, &req, policy))
}

fn process_view(path: &Path, providers: &Providers, opts: &PipelineOptions) -> ViewCaption {
    let mut view = ViewCaption {
        image: path.display().to_string(),
        raw: None,
        simplified: None,
        empty: false,
        error: None,
        attempts: 0,
    };
    let png = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            view.error = Some(format!("read {}: {e}", path.display()));
            return view;
        }
    };
    let raw = caption_view(&png, providers.caption.as_ref(), &opts.retry);
    view.attempts += raw.attempts;
    let raw = match raw.result {
        Ok(r) => r,
        Err(e) => {
            view.error = Some(format!("caption: {e}"));
            return view;
        }
    };
    match simplify_caption(&raw, providers.simplify.as_ref(), &opts.few_shot, &opts.retry) {
        None => view.empty = true,
        Some(s) => {
            view.attempts += s.attempts;
            match s.result {
                Ok(text) => view.simplified = Some(text),
                Err(e) => view.error = Some(format!("simplify: {e}")),
            }
        }
    }
    view.raw = Some(raw);
    view
}

fn process_job(job: &CaptionJob, providers: &Providers, meta: &ProviderMeta, opts: &PipelineOptions) -> CaptionRecord {
    let started = now_ms();
    let views: Vec<ViewCaption> = job.views.iter().take(MAX_VIEWS).map(|p| process_view(p, providers, opts)).collect();
    let simplified: Vec<String> = views.iter().filter_map(|v| v.simplified.clone()).collect();
    let (fused, fuse_error) = match fuse_captions(&simplified, providers.fuse.as_ref(), &opts.few_shot, &opts.retry) {
        None => (None, Some("no simplified captions".to_string())),
        Some(a) => match a.result {
            Ok(text) if !text.trim().is_empty() => (Some(text), None),
            Ok(_) => (None, Some("empty fused caption".to_string())),
            Err(e) => (None, Some(format!("fuse: {e}"))),
        },
    };
    CaptionRecord {
        id: job.id.clone(),
        views,
        fused,
        fuse_error,
        providers: meta.clone(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    }
}

/// Records of a JSONL output file; for repeated ids the last line wins.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, CaptionRecord> = HashMap::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line)?;
        if !by_id.contains_key(&rec.id) {
            order.push(rec.id.clone());
        }
        by_id.insert(rec.id.clone(), rec);
    }
    Ok(order.into_iter().filter_map(|id| by_id.remove(&id)).collect())
}

/// Runs all three stages over `jobs`, appending records to `out_path`.
pub fn run_pipeline(jobs: &[CaptionJob], providers: Providers, out_path: impl AsRef<Path>, opts: &PipelineOptions) -> Result<PipelineStats> {
    let out_path = out_path.as_ref();
    if opts.workers == 0 {
        return Err(CaptionError::Config("workers must be at least 1".into()));
    }
    let done: HashSet<String> = if opts.resume && out_path.exists() {
        read_records(out_path)?.into_iter().filter(|r| r.fused.is_some()).map(|r| r.id).collect()
    } else {
        HashSet::new()
    };
    let mut out = OpenOptions::new()
        .create(true)
        .write(true)
        .append(opts.resume)
        .truncate(!opts.resume)
        .open(out_path)?;

    let providers = match &opts.request_log {
        Some(p) => providers.logged(Arc::new(RequestLog::append_to(p)?)),
        None => providers,
    };
    let meta = providers.meta();
    let mut stats = PipelineStats {
        objects: jobs.len(),
        ..Default::default()
    };
    let todo: Vec<&CaptionJob> = jobs.iter().filter(|j| !done.contains(&j.id)).collect();
    stats.resumed = jobs.len() - todo.len();
    if stats.resumed > 0 {
        log::info!("resuming: {} of {} objects already fused", stats.resumed, jobs.len());
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<CaptionRecord>();
    let written: Result<Vec<CaptionRecord>> = std::thread::scope(|s| {
        for _ in 0..opts.workers.min(todo.len()) {
            let tx = tx.clone();
            let (next, todo, providers, meta) = (&next, &todo, &providers, &meta);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = todo.get(i) else { break };
                if tx.send(process_job(job, providers, meta, opts)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut written = Vec::new();
        for rec in rx {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
            out.flush()?;
            written.push(rec);
        }
        Ok(written)
    });
    for rec in written? {
        if rec.fused.is_none() {
            log::warn!("{}: unfused ({})", rec.id, rec.fuse_error.as_deref().unwrap_or("unknown"));
        }
        stats.count(&rec);
    }
    // Objects fused in an earlier run count as fully processed.
    stats.captioned += stats.resumed;
    stats.simplified += stats.resumed;
    stats.fused += stats.resumed;
    Ok(stats)
}

/// Dataset-level statistics over fused captions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub samples: usize,
    /// Mean fused caption length in characters.
    pub mean_length_chars: f64,
    pub mean_length_words: f64,
}

pub fn dataset_statistics(records: &[CaptionRecord]) -> DatasetStatistics {
    let fused: Vec<&str> = records.iter().filter_map(|r| r.fused.as_deref()).collect();
    let n = fused.len();
    let mean = |f: &dyn Fn(&str) -> usize| {
        if n == 0 {
            0.0
        } else {
            fused.iter().map(|s| f(s)).sum::<usize>() as f64 / n as f64
        }
    };
    DatasetStatistics {
        samples: n,
        mean_length_chars: mean(&|s| s.chars().count()),
        mean_length_words: mean(&|s| s.split_whitespace().count()),
    }
}
