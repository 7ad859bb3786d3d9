//! Gateway behaviour against scripted backends and a loopback HTTP server.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use sentreason_core::gateway::http::{LocalServerBackend, OpenAiChatBackend};
use sentreason_core::gateway::{
    BackendFailure, GatewayError, ResponseCache, RetryPolicy, TextBackend,
};
use sentreason_core::prompts::{PromptMode, RenderedPrompt};
use sentreason_core::{Gateway, GenerationRequest};

fn request(id: &str) -> GenerationRequest {
    GenerationRequest::new(
        RenderedPrompt {
            mode: PromptMode::ThRe,
            example_id: id.into(),
            text: format!("prompt for {id}"),
        },
        "test-gen",
    )
}

/// Fails with a transport error the first `failures` times each prompt is seen.
struct Flaky {
    failures: usize,
    seen: Mutex<HashMap<String, usize>>,
}

impl TextBackend for Flaky {
    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendFailure> {
        let mut seen = self.seen.lock().unwrap();
        let n = seen.entry(req.prompt.text.clone()).or_default();
        *n += 1;
        if *n <= self.failures {
            Err(BackendFailure::Transport("connection reset".into()))
        } else {
            Ok(format!("echo {}", req.prompt.example_id))
        }
    }
}

#[test]
fn transport_failures_are_retried_then_recorded() {
    let gw = Gateway::new(
        Flaky { failures: 2, seen: Mutex::default() },
        ResponseCache::in_memory(),
        RetryPolicy::no_delay(3),
    );
    let rec = gw.generate(&request("a")).unwrap();
    assert_eq!(rec.attempt, 3);
    assert_eq!(rec.response_text, "echo a");
    assert_eq!(gw.backend_calls(), 3);
}

#[test]
fn retries_are_bounded() {
    let gw = Gateway::new(
        Flaky { failures: 10, seen: Mutex::default() },
        ResponseCache::in_memory(),
        RetryPolicy::no_delay(3),
    );
    match gw.generate(&request("a")) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert!(gw.cache().is_empty());
}

/// Sleeps inside `complete` and records the peak number of concurrent calls.
#[derive(Default)]
struct Counting {
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl TextBackend for Counting {
    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendFailure> {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(20));
        self.active.fetch_sub(1, Ordering::SeqCst);
        if req.prompt.example_id == "r7" {
            return Err(BackendFailure::Refusal { payload: "no".into() });
        }
        Ok(req.prompt.example_id.clone())
    }
}

#[test]
fn batch_respects_concurrency_bound_and_order() {
    let backend = Arc::new(Counting::default());
    let gw = Gateway::new(backend.clone(), ResponseCache::in_memory(), RetryPolicy::no_delay(0));
    let reqs: Vec<_> = (0..10).map(|i| request(&format!("r{i}"))).collect();
    let out = gw.generate_batch(&reqs, 3);
    assert_eq!(out.len(), 10);
    assert!(backend.peak.load(Ordering::SeqCst) <= 3);
    assert!(backend.peak.load(Ordering::SeqCst) >= 2, "expected some parallelism");
    for (i, r) in out.iter().enumerate() {
        if i == 7 {
            assert!(matches!(r, Err(GatewayError::Refusal { .. })));
        } else {
            assert_eq!(r.as_ref().unwrap().response_text, format!("r{i}"));
        }
    }
    assert!(gw.generate_batch(&[], 3).is_empty());
}

#[test]
fn warm_cache_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let reqs: Vec<_> = (0..5).map(|i| request(&format!("r{i}"))).collect();
    let first = {
        let gw = Gateway::new(Arc::new(Counting::default()), ResponseCache::open(&path).unwrap(), RetryPolicy::no_delay(0));
        let out: Vec<_> = gw.generate_batch(&reqs, 2).into_iter().map(Result::unwrap).collect();
        assert_eq!(gw.backend_calls(), 5);
        out
    };
    let gw = Gateway::new(Arc::new(Counting::default()), ResponseCache::open(&path).unwrap(), RetryPolicy::no_delay(0));
    let second: Vec<_> = gw.generate_batch(&reqs, 2).into_iter().map(Result::unwrap).collect();
    assert_eq!(gw.backend_calls(), 0);
    assert_eq!(first, second);
}

/// A one-thread HTTP/1.1 server answering each request with the next canned
/// `(status, body)` pair. Returns the base URL and the captured request bodies.
fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((head, String::from_utf8(buf).unwrap()));
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

#[test]
fn chat_adapter_round_trip_with_retry() {
    let (base, seen) = serve(vec![
        (503, "overloaded"),
        (200, r#"{"choices":[{"message":{"role":"assistant","content":"it is positive"},"finish_reason":"stop"}]}"#),
    ]);
    let backend = OpenAiChatBackend::new(base, "gpt-x", Some("sk-test".into()));
    let gw = Gateway::new(backend, ResponseCache::in_memory(), RetryPolicy::no_delay(2));
    let rec = gw.generate(&request("a")).unwrap();
    assert_eq!(rec.response_text, "it is positive");
    assert_eq!(rec.attempt, 2);
    let seen = seen.lock().unwrap();
    let (head, body) = &seen[1];
    assert!(head.starts_with("POST /chat/completions"));
    assert!(head.to_ascii_lowercase().contains("authorization: bearer sk-test"));
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "gpt-x");
    assert_eq!(v["messages"][0]["content"], "prompt for a");
    assert_eq!(v["max_tokens"], 256);
}

#[test]
fn chat_adapter_refusal_and_rejection() {
    let (base, _) = serve(vec![
        (200, r#"{"choices":[{"message":{"content":null},"finish_reason":"content_filter"}]}"#),
        (401, r#"{"error":"bad key"}"#),
    ]);
    let gw = Gateway::new(OpenAiChatBackend::new(base, "m", None), ResponseCache::in_memory(), RetryPolicy::no_delay(2));
    assert!(matches!(gw.generate(&request("a")), Err(GatewayError::Refusal { .. })));
    assert!(matches!(gw.generate(&request("b")), Err(GatewayError::Rejected { status: 401, .. })));
    assert_eq!(gw.backend_calls(), 2);
}

#[test]
fn local_server_adapter_round_trip() {
    let (base, seen) = serve(vec![(200, r#"[{"generated_text":"negative"}]"#)]);
    let gw = Gateway::new(LocalServerBackend::new(base), ResponseCache::in_memory(), RetryPolicy::no_delay(0));
    let mut req = request("a");
    req.seed = Some(7);
    assert_eq!(gw.generate(&req).unwrap().response_text, "negative");
    let seen = seen.lock().unwrap();
    assert!(seen[0].0.starts_with("POST /generate"));
    let v: serde_json::Value = serde_json::from_str(&seen[0].1).unwrap();
    assert_eq!(v["inputs"], "prompt for a");
    assert_eq!(v["parameters"]["do_sample"], false);
    assert_eq!(v["parameters"]["seed"], 7);
    assert!(v["parameters"].get("temperature").is_none());
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let gw = Gateway::new(
        LocalServerBackend::new(format!("http://127.0.0.1:{port}")),
        ResponseCache::in_memory(),
        RetryPolicy::no_delay(1),
    );
    assert!(matches!(gw.generate(&request("a")), Err(GatewayError::Transport { attempts: 2, .. })));
}
