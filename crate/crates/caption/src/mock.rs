//! Offline providers: a deterministic mock for all three stages, plus
//! wrappers for fault injection and in-flight accounting.

use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use trigen_stage1::synthdata::NamedColor;

use crate::prompts::{FUSE_PROMPT, SIMPLIFY_PROMPT};
use crate::provider::{ChatRequest, Provider, ProviderError};

pub const MOCK_MAX_CHARS: usize = 300;

/// Captions images as "a {color} {shape}" from pixel statistics, returns the
/// description unchanged when simplifying, and fuses by joining the distinct
/// descriptions (bounded by [`MOCK_MAX_CHARS`]).
#[derive(Debug, Default)]
pub struct MockProvider {
    pub latency: Duration,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_latency(latency: Duration) -> Self {
        Self {
            latency,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Provider for MockProvider {
    fn name(&self) -> String {
        "mock".into()
    }

    fn model(&self) -> &str {
        "mock-1"
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let first = req.messages.first().ok_or_else(|| ProviderError::Malformed("empty request".into()))?;
        if let Some(png) = first.image_bytes() {
            return describe_png(&png);
        }
        let last = req.last_user_text().unwrap_or_default();
        match first.content.as_str() {
            SIMPLIFY_PROMPT => Ok(last.to_string()),
            FUSE_PROMPT => Ok(fuse_list(last)),
            _ => Err(ProviderError::Malformed("unrecognized request".into())),
        }
    }
}

fn fuse_list(numbered: &str) -> String {
    let mut seen: Vec<&str> = Vec::new();
    for line in numbered.lines() {
        let text = line.split_once(". ").map_or(line, |(n, rest)| if n.chars().all(|c| c.is_ascii_digit()) { rest } else { line });
        let text = text.trim();
        if !text.is_empty() && !seen.contains(&text) {
            seen.push(text);
        }
    }
    truncate_words(&seen.join(" "), MOCK_MAX_CHARS)
}

/// Cuts at the last word boundary within `max` bytes.
pub fn truncate_words(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = 0;
    for (i, _) in s.char_indices().filter(|(_, c)| c.is_whitespace()) {
        if i > max {
            break;
        }
        end = i;
    }
    if end == 0 {
        end = s.char_indices().take_while(|(i, _)| *i < max).last().map_or(0, |(i, c)| i + c.len_utf8());
    }
    s[..end].trim_end().to_string()
}

fn describe_png(png: &[u8]) -> Result<String, ProviderError> {
    let decoder = png::Decoder::new(Cursor::new(png));
    let mut reader = decoder.read_info().map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let channels = info.color_type.samples();
    if info.bit_depth != png::BitDepth::Eight || channels < 3 {
        return Err(ProviderError::Malformed("expected 8-bit RGB".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (mut sum, mut n) = ([0.0f32; 3], 0usize);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let p = &buf[(y * w + x) * channels..][..3];
            if p.iter().all(|&c| c >= 250) {
                continue;
            }
            for ch in 0..3 {
                sum[ch] += p[ch] as f32 / 255.0;
            }
            n += 1;
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
        }
    }
    if n == 0 {
        return Ok("an empty white background".into());
    }
    let mean = sum.map(|s| s / n as f32);
    // Shading scales the albedo, so compare hues by direction only.
    let color = NamedColor::ALL
        .into_iter()
        .max_by(|a, b| cosine(a.rgb(), mean).total_cmp(&cosine(b.rgb(), mean)))
        .expect("non-empty palette");
    let (bw, bh) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
    let fill = n as f32 / (bw * bh);
    let aspect = bh / bw;
    let shape = if aspect > 1.6 {
        "tall object"
    } else if aspect < 0.6 {
        "flat object"
    } else if fill > 0.9 {
        "box"
    } else if fill > 0.7 {
        "round object"
    } else {
        "object"
    };
    Ok(format!("a {} {}", color.name(), shape))
}

fn cosine(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Fails the first `failures` calls with a retryable transport error.
pub struct FaultInjector<P> {
    pub inner: P,
    failures: usize,
    calls: AtomicUsize,
}

impl<P: Provider> FaultInjector<P> {
    pub fn new(inner: P, failures: usize) -> Self {
        Self {
            inner,
            failures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: Provider> Provider for FaultInjector<P> {
    fn name(&self) -> String {
        format!("faulty({})", self.inner.name())
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        if k < self.failures {
            return Err(ProviderError::Transport(format!("injected failure {}", k + 1)));
        }
        self.inner.complete(req)
    }
}

/// Always fails with a non-retryable status.
pub struct Broken;

impl Provider for Broken {
    fn name(&self) -> String {
        "broken".into()
    }

    fn model(&self) -> &str {
        "none"
    }

    fn complete(&self, _req: &ChatRequest) -> Result<String, ProviderError> {
        Err(ProviderError::Status(400, "rejected".into()))
    }
}

/// Tracks the current and peak number of concurrent calls.
pub struct InFlightProbe<P> {
    pub inner: P,
    current: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl<P: Provider> InFlightProbe<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            current: Arc::default(),
            peak: Arc::default(),
        }
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<P: Provider> Provider for InFlightProbe<P> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let out = self.inner.complete(req);
        self.current.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
