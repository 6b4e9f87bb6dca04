use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use msgca::embed_client::{embed_with, Backend, HttpProvider, ProviderConfig};
use serde_json::{json, Value};
use tiny_http::{Response, Server};

/// Serves embeddings `[n, len]` for a text "tN", returning items in reverse
/// order. The first `fail_first` requests get `fail_status`.
struct Stub {
    url: String,
    requests: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

fn stub(fail_first: usize, fail_status: u16) -> Stub {
    let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}/embed", server.server_addr().to_ip().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let live = Arc::new(AtomicUsize::new(0));
    for _ in 0..4 {
        let (server, requests, peak, live) =
            (server.clone(), requests.clone(), peak.clone(), live.clone());
        thread::spawn(move || {
            while let Ok(mut req) = server.recv() {
                let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let seen = requests.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                thread::sleep(std::time::Duration::from_millis(30));
                let resp = if seen < fail_first {
                    Response::from_string("busy").with_status_code(fail_status)
                } else {
                    let v: Value = serde_json::from_str(&body).unwrap();
                    let input = v["input"].as_array().unwrap();
                    let data: Vec<Value> = input
                        .iter()
                        .enumerate()
                        .rev()
                        .map(|(i, t)| {
                            let n: f64 = t.as_str().unwrap()[1..].parse().unwrap();
                            json!({"index": i, "embedding": [n, input.len() as f64]})
                        })
                        .collect();
                    Response::from_string(json!({ "data": data }).to_string())
                };
                live.fetch_sub(1, Ordering::SeqCst);
                let _ = req.respond(resp);
            }
        });
    }
    Stub {
        url,
        requests,
        peak,
    }
}

fn config(url: &str, max_batch: usize, max_parallel: usize) -> ProviderConfig {
    ProviderConfig {
        backend: Backend::Http,
        endpoint: Some(url.to_string()),
        dim: 2,
        max_batch,
        max_parallel,
        retry_base_ms: 5,
        ..ProviderConfig::default()
    }
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

#[test]
fn keeps_input_order_and_caps_concurrency() {
    let s = stub(0, 500);
    let cfg = config(&s.url, 3, 2);
    let provider = HttpProvider::new(&cfg).unwrap();
    let out = embed_with(&provider, &texts(20), &cfg).unwrap();
    assert_eq!(out.len(), 20);
    for (i, v) in out.iter().enumerate() {
        assert_eq!(v[0], i as f64);
        assert!(v[1] <= 3.0);
    }
    assert_eq!(s.requests.load(Ordering::SeqCst), 7);
    assert!(s.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn retries_rate_limits_and_server_errors() {
    for status in [429, 503] {
        let s = stub(2, status);
        let cfg = config(&s.url, 8, 1);
        let provider = HttpProvider::new(&cfg).unwrap();
        let out = embed_with(&provider, &texts(4), &cfg).unwrap();
        assert_eq!(out[3][0], 3.0);
        assert_eq!(s.requests.load(Ordering::SeqCst), 3);
    }
}

#[test]
fn gives_up_after_three_attempts() {
    let s = stub(usize::MAX, 500);
    let cfg = config(&s.url, 8, 1);
    let provider = HttpProvider::new(&cfg).unwrap();
    assert!(embed_with(&provider, &texts(2), &cfg).is_err());
    assert_eq!(s.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(usize::MAX, 400);
    let cfg = config(&s.url, 8, 1);
    let provider = HttpProvider::new(&cfg).unwrap();
    assert!(embed_with(&provider, &texts(2), &cfg).is_err());
    assert_eq!(s.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn wrong_width_is_a_contract_error() {
    let s = stub(0, 500);
    let mut cfg = config(&s.url, 8, 1);
    cfg.dim = 5;
    let provider = HttpProvider::new(&cfg).unwrap();
    let err = embed_with(&provider, &texts(2), &cfg).unwrap_err();
    assert!(matches!(
        err,
        msgca::MsgcaError::Contract {
            expected: 5,
            actual: 2
        }
    ));
}
