use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use trigen_caption::log::{RequestLog, ReplayProvider};
use trigen_caption::prompts::{caption_request, format_descriptions, fuse_request, simplify_request, SIMPLIFY_SHOTS};
use trigen_caption::provider::{complete_with_retry, parse_completion, ChatRequest};
use trigen_caption::*;
use trigen_stage1::synthdata::{build_manifest, render_gt, DatasetConfig, NamedColor, ProceduralObject};
use trigen_stage1::Camera;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 3,
        base_delay_ms: 1,
        max_delay_ms: 4,
    }
}

fn opts() -> PipelineOptions {
    PipelineOptions {
        workers: 3,
        retry: fast_retry(),
        resume: true,
        ..Default::default()
    }
}

fn dataset(dir: &Path, n: usize) -> Vec<CaptionJob> {
    let cfg = DatasetConfig {
        n_objects: n,
        n_views: 3,
        resolution: 32,
        seed: 7,
    };
    let manifest = build_manifest(&cfg, dir).unwrap();
    jobs_from_manifest(&manifest, dir)
}

fn sphere_png(color: NamedColor) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.png");
    let cam = Camera::orbit(30.0, 20.0, 48).unwrap();
    render_gt(&ProceduralObject::sphere(0.5, color), &cam).unwrap().save_png(&path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn mock_caption_is_deterministic_and_names_the_color() {
    let mock = MockProvider::new();
    let png = sphere_png(NamedColor::Red);
    let a = caption_view(&png, &mock, &fast_retry()).result.unwrap();
    let b = caption_view(&png, &mock, &fast_retry()).result.unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("a red"), "{a}");
    let blue = caption_view(&sphere_png(NamedColor::Blue), &mock, &fast_retry()).result.unwrap();
    assert!(blue.starts_with("a blue"), "{blue}");
}

#[test]
fn prompt_bodies_match_templates_verbatim() {
    assert_eq!(
        CAPTION_PROMPT,
        "I will show you a picture of a 3D object. Briefly describe the appearance and shape of it."
    );
    assert!(SIMPLIFY_PROMPT.contains("remove the irrelevant comments"));
    assert!(SIMPLIFY_PROMPT.contains("compress the description into one or two sentences"));
    assert!(FUSE_PROMPT.contains("DO NOT generate ambiguous, contradictory or repeated information"));
    assert!(FUSE_PROMPT.contains("conclude these descriptions into one concise caption"));

    let shots = FewShot::bundled();
    assert_eq!(shots.simplify.len(), SIMPLIFY_SHOTS);
    let cap = caption_request("m", 0.0, b"png");
    assert_eq!(cap.messages[0].content, CAPTION_PROMPT);
    assert_eq!(cap.messages[0].image_bytes().unwrap(), b"png");
    let simp = simplify_request("m", 0.0, &shots, "x");
    assert_eq!(simp.messages[0].content, SIMPLIFY_PROMPT);
    assert_eq!(simp.messages.len(), 2 + 2 * SIMPLIFY_SHOTS);
    assert_eq!(simp.last_user_text(), Some("x"));
    let fuse = fuse_request("m", 0.0, &shots, &["a".into(), "b".into()]);
    assert_eq!(fuse.messages[0].content, FUSE_PROMPT);
    assert_eq!(fuse.messages.len(), 4);
    assert_eq!(fuse.last_user_text(), Some("1. a\n2. b"));
}

#[test]
fn transient_failures_are_retried() {
    let flaky = FaultInjector::new(MockProvider::new(), 2);
    let out = caption_view(&sphere_png(NamedColor::Green), &flaky, &fast_retry());
    assert_eq!(out.attempts, 3);
    assert!(out.result.unwrap().starts_with("a green"));

    let hopeless = FaultInjector::new(MockProvider::new(), 10);
    let out = caption_view(&sphere_png(NamedColor::Green), &hopeless, &fast_retry());
    assert_eq!(out.attempts, 4);
    assert!(out.result.is_err());

    let out = caption_view(b"x", &Broken, &fast_retry());
    assert_eq!(out.attempts, 1, "client errors are not retried");
}

#[test]
fn backoff_doubles_and_caps() {
    let p = RetryPolicy::default();
    assert_eq!(p.delay(0), Duration::from_millis(500));
    assert_eq!(p.delay(1), Duration::from_millis(1000));
    assert_eq!(p.delay(3), Duration::from_millis(4000));
    assert_eq!(p.delay(10), Duration::from_millis(8000));
}

#[test]
fn simplify_passthrough_and_empty_guard() {
    let mock = MockProvider::new();
    let shots = FewShot::bundled();
    let out = simplify_caption("a small red chair with four legs", &mock, &shots, &fast_retry()).unwrap();
    assert_eq!(out.result.unwrap(), "a small red chair with four legs");
    assert_eq!(mock.calls(), 1);
    assert!(simplify_caption("  ", &mock, &shots, &fast_retry()).is_none());
    assert_eq!(mock.calls(), 1);
}

#[test]
fn fusion_contracts() {
    let mock = MockProvider::new();
    let shots = FewShot::bundled();
    let one = fuse_captions(&["a blue torus".into()], &mock, &shots, &fast_retry()).unwrap();
    assert_eq!(one.result.unwrap(), "a blue torus");

    let long = "a tall wooden bookshelf with five shelves holding colorful books and a small plant on top".to_string();
    let ten = vec![long.clone(); 10];
    let fused = fuse_captions(&ten, &mock, &shots, &fast_retry()).unwrap().result.unwrap();
    assert!(!fused.is_empty() && fused.len() <= MOCK_MAX_CHARS);
    assert_eq!(fused, long);

    assert!(fuse_captions(&[String::new()], &mock, &shots, &fast_retry()).is_none());
    assert!(fuse_captions(&[], &mock, &shots, &fast_retry()).is_none());
}

#[test]
fn five_object_run_then_idempotent_resume() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = dataset(dir.path(), 5);
    let out = dir.path().join("captions.jsonl");
    let mock = Arc::new(MockProvider::new());
    let stats = run_pipeline(&jobs, Providers::uniform(mock.clone()), &out, &opts()).unwrap();
    assert_eq!((stats.captioned, stats.simplified, stats.fused, stats.failed), (5, 5, 5, 0));
    let records = read_records(&out).unwrap();
    assert_eq!(records.len(), 5);
    for r in &records {
        assert!(r.fused.as_deref().is_some_and(|f| !f.is_empty()));
        assert_eq!(r.views.len(), 3);
        assert!(r.views.iter().all(|v| v.attempts == 2 && v.error.is_none()));
        assert_eq!(r.providers.caption, "mock/mock-1");
    }
    let calls = mock.calls();
    assert_eq!(calls, 5 * (3 + 3 + 1));

    let again = run_pipeline(&jobs, Providers::uniform(mock.clone()), &out, &opts()).unwrap();
    assert_eq!(mock.calls(), calls, "resume must not call providers");
    assert_eq!(again.resumed, 5);
    assert_eq!(again.fused, 5);
    assert_eq!(read_records(&out).unwrap().len(), 5);

    let stats = dataset_statistics(&records);
    assert_eq!(stats.samples, 5);
    assert!(stats.mean_length_chars > stats.mean_length_words);
}

#[test]
fn failed_objects_are_retried_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = dataset(dir.path(), 2);
    let out = dir.path().join("captions.jsonl");
    let broken = Providers {
        caption: Arc::new(MockProvider::new()),
        simplify: Arc::new(MockProvider::new()),
        fuse: Arc::new(Broken),
    };
    let stats = run_pipeline(&jobs, broken, &out, &opts()).unwrap();
    assert_eq!((stats.captioned, stats.simplified, stats.fused, stats.failed), (2, 2, 0, 2));
    let stats = run_pipeline(&jobs, Providers::uniform(Arc::new(MockProvider::new())), &out, &opts()).unwrap();
    assert_eq!((stats.resumed, stats.fused, stats.failed), (0, 2, 0));
    assert!(read_records(&out).unwrap().iter().all(|r| r.fused.is_some()));
}

#[test]
fn bad_views_do_not_discard_the_object() {
    let dir = tempfile::tempdir().unwrap();
    let mut jobs = dataset(dir.path(), 1);
    jobs[0].views.push(dir.path().join("missing.png"));
    let out = dir.path().join("captions.jsonl");
    let stats = run_pipeline(&jobs, Providers::uniform(Arc::new(MockProvider::new())), &out, &opts()).unwrap();
    assert_eq!(stats.fused, 1);
    let r = &read_records(&out).unwrap()[0];
    assert!(r.views[3].error.as_deref().unwrap().contains("missing.png"));
    assert_eq!(r.views[3].attempts, 0);
}

#[test]
fn all_views_failing_leaves_the_record_unfused() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = dataset(dir.path(), 1);
    let out = dir.path().join("captions.jsonl");
    let stats = run_pipeline(&jobs, Providers::uniform(Arc::new(Broken)), &out, &opts()).unwrap();
    assert_eq!((stats.captioned, stats.simplified, stats.fused, stats.failed), (0, 0, 0, 1));
    let r = &read_records(&out).unwrap()[0];
    assert!(r.fused.is_none() && r.fuse_error.is_some());
}

#[test]
fn replaying_the_log_reproduces_records() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = dataset(dir.path(), 3);
    let log_path = dir.path().join("requests.jsonl");
    let first = dir.path().join("a.jsonl");
    let flaky: Arc<dyn Provider> = Arc::new(FaultInjector::new(MockProvider::new(), 2));
    let providers = Providers {
        caption: flaky,
        simplify: Arc::new(MockProvider::new()),
        fuse: Arc::new(MockProvider::new()),
    };
    let o = PipelineOptions {
        request_log: Some(log_path.clone()),
        workers: 1,
        ..opts()
    };
    run_pipeline(&jobs, providers, &first, &o).unwrap();
    let entries = RequestLog::read(&log_path).unwrap();
    assert_eq!(entries.len(), 3 * (3 + 3 + 1) + 2);
    for e in &entries {
        assert_eq!(e.request_sha256, e.request.content_hash());
    }

    let replay = Providers {
        caption: Arc::new(ReplayProvider::new(&entries, "caption")),
        simplify: Arc::new(ReplayProvider::new(&entries, "simplify")),
        fuse: Arc::new(ReplayProvider::new(&entries, "fuse")),
    };
    let second = dir.path().join("b.jsonl");
    run_pipeline(&jobs, replay, &second, &PipelineOptions { workers: 1, ..opts() }).unwrap();
    let (a, b) = (read_records(&first).unwrap(), read_records(&second).unwrap());
    assert_eq!(a.len(), b.len());
    for ra in &a {
        let rb = b.iter().find(|r| r.id == ra.id).unwrap();
        // The flaky provider's failed attempts are not part of the replay.
        let strip = |r: &CaptionRecord| {
            let mut r = r.clone();
            r.views.iter_mut().for_each(|v| v.attempts = 0);
            r
        };
        assert!(strip(ra).same_content(&strip(rb)), "{ra:?} vs {rb:?}");
    }
}

#[test]
fn concurrency_never_exceeds_the_worker_cap() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = dataset(dir.path(), 8);
    let probe = Arc::new(InFlightProbe::new(MockProvider::with_latency(Duration::from_millis(5))));
    let out = dir.path().join("captions.jsonl");
    let stats = run_pipeline(&jobs, Providers::uniform(probe.clone()), &out, &opts()).unwrap();
    assert_eq!(stats.fused, 8);
    assert!(probe.peak() <= 3, "peak {}", probe.peak());
    assert!(probe.peak() >= 2, "the pool should overlap requests");
}

#[test]
fn provider_config_validation() {
    let json = r#"{"endpoint":"http://x","model":"m"}"#;
    let cfg: ProviderConfig = serde_json::from_str(json).unwrap();
    assert_eq!((cfg.timeout_secs, cfg.max_retries, cfg.concurrency), (60, 3, 4));
    assert!(serde_json::from_str::<ProviderConfig>(r#"{"endpoint":"x","model":"m","bogus":1}"#).is_err());
    let bad = ProviderConfig { concurrency: 0, ..cfg };
    assert!(bad.validate().is_err());
}

#[test]
fn completion_parsing() {
    assert_eq!(parse_completion(r#"{"choices":[{"message":{"content":" hi "}}]}"#).unwrap(), "hi");
    assert!(parse_completion(r#"{"choices":[]}"#).is_err());
    assert!(parse_completion("not json").is_err());
}

/// Serves the given (status, body) responses in order, one per connection,
/// and returns the request bodies it saw.
fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(format!("{auth}\n{}", String::from_utf8(buf).unwrap()));
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_provider_speaks_chat_completions_and_retries_5xx() {
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"a red sphere"}}]}"#.to_string();
    let (url, server) = serve(vec![(503, "busy".into()), (200, ok)]);
    std::env::set_var("TRIGEN_TEST_TOKEN", "secret");
    let provider = HttpProvider::new(ProviderConfig {
        endpoint: url,
        model: "vision-model".into(),
        auth_env: Some("TRIGEN_TEST_TOKEN".into()),
        timeout_secs: 10,
        max_retries: 3,
        concurrency: 1,
        temperature: 0.2,
    })
    .unwrap();
    let req = caption_request(provider.model(), provider.temperature(), b"\x89PNG");
    let out = complete_with_retry(&provider, &req, &fast_retry());
    assert_eq!(out.attempts, 2);
    assert_eq!(out.result.unwrap(), "a red sphere");
    let bodies = server.join().unwrap();
    let (auth, body) = bodies[1].split_once('\n').unwrap();
    assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer secret");
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "vision-model");
    assert_eq!(v["messages"][0]["content"][0]["text"], CAPTION_PROMPT);
    assert!(v["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn http_provider_requires_its_token_variable() {
    let cfg = ProviderConfig {
        endpoint: "http://127.0.0.1:9".into(),
        model: "m".into(),
        auth_env: Some("TRIGEN_TOKEN_THAT_IS_NOT_SET".into()),
        timeout_secs: 1,
        max_retries: 0,
        concurrency: 1,
        temperature: 0.0,
    };
    assert!(matches!(HttpProvider::new(cfg), Err(CaptionError::Config(_))));
}

proptest! {
    #[test]
    fn truncation_respects_the_limit(words in proptest::collection::vec("[a-z]{1,12}", 0..80), max in 1usize..200) {
        let s = words.join(" ");
        let t = mock::truncate_words(&s, max);
        prop_assert!(t.len() <= max);
        prop_assert!(s.starts_with(&t));
    }

    #[test]
    fn request_hash_tracks_content(a in "[ -~]{0,40}", b in "[ -~]{0,40}") {
        let shots = FewShot::bundled();
        let ra = simplify_request("m", 0.0, &shots, &a);
        let rb = simplify_request("m", 0.0, &shots, &b);
        prop_assert_eq!(ra.content_hash() == rb.content_hash(), a == b);
        let round: ChatRequest = serde_json::from_str(&serde_json::to_string(&ra).unwrap()).unwrap();
        prop_assert_eq!(round.content_hash(), ra.content_hash());
    }

    #[test]
    fn numbered_lists_round_trip_through_the_mock(items in proptest::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,3}", 1..10)) {
        let list = format_descriptions(&items);
        prop_assert_eq!(list.lines().count(), items.len());
        let mock = MockProvider::new();
        let fused = fuse_captions(&items, &mock, &FewShot::bundled(), &RetryPolicy::default()).unwrap().result.unwrap();
        prop_assert!(!fused.is_empty() && fused.len() <= MOCK_MAX_CHARS);
    }
}
