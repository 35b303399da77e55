//! RemoteClassifier against a minimal HTTP/1.1 stub built on std.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use disas_core::{
    generate_sample, pipeline, Classifier, ClassifyError, CorpusParams, GroundTruthClassifier,
    PipelineConfig, RemoteClassifier,
};
use serde_json::{json, Value};

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
}

/// Serves `/v1/classify`. The first requests get the statuses in `script`;
/// after that each span is answered 1.0 if its address is in `truth`.
/// With `short` set the stub drops the last probability of every result.
fn serve(script: Vec<u16>, truth: BTreeSet<u64>, short: bool) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let script = Mutex::new(script.into_iter());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            counter.fetch_add(1, Ordering::SeqCst);

            let (status, reply) = match script.lock().unwrap().next() {
                Some(code) => (code, "{}".to_string()),
                None if !request_line.starts_with("POST /v1/classify ") => (404, "{}".into()),
                None => {
                    let req: Value = serde_json::from_slice(&body).unwrap();
                    let results: Vec<Value> = req["requests"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|r| {
                            let mut p: Vec<f64> = r["spans"]
                                .as_array()
                                .unwrap()
                                .iter()
                                .map(|s| {
                                    let a = s["address"].as_u64().unwrap();
                                    if truth.contains(&a) {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                })
                                .collect();
                            if short {
                                p.pop();
                            }
                            json!({ "probabilities": p })
                        })
                        .collect();
                    (200, json!({ "results": results }).to_string())
                }
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    Stub { url, hits }
}

fn small_sample() -> disas_core::Sample {
    generate_sample(
        5,
        &CorpusParams {
            blocks: 12,
            ..CorpusParams::default()
        },
    )
}

fn client(url: &str, retries: u32) -> RemoteClassifier {
    RemoteClassifier::new(url)
        .unwrap()
        .with_retries(retries, Duration::from_millis(1))
}

/// One request from a real pipeline run, to have a well-formed batch.
fn one_request() -> Vec<disas_core::ClassifyRequest> {
    use disas_core::corpus::Recorder;
    use disas_core::Engine;
    let s = small_sample();
    let rec = Recorder::new(GroundTruthClassifier::new(
        s.truth.instruction_starts.clone(),
    ));
    let mut engine = Engine::from_region(&s.region, &rec, PipelineConfig::default()).unwrap();
    engine.prefilter_pass().unwrap();
    rec.take().into_iter().take(1).collect()
}

#[test]
fn endpoint_path_is_appended_once() {
    assert_eq!(client("http://h:1/", 0).url(), "http://h:1/v1/classify");
    assert_eq!(
        client("http://h:1/v1/classify", 0).url(),
        "http://h:1/v1/classify"
    );
}

#[test]
fn retries_server_errors() {
    let stub = serve(vec![503, 500], BTreeSet::new(), false);
    let out = client(&stub.url, 2).classify(&one_request()).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_the_retry_budget() {
    let stub = serve(vec![503; 5], BTreeSet::new(), false);
    let err = client(&stub.url, 1).classify(&one_request()).unwrap_err();
    assert!(matches!(err, ClassifyError::Transport(_)), "{err:?}");
    assert_eq!(stub.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = serve(vec![422], BTreeSet::new(), false);
    let err = client(&stub.url, 3).classify(&one_request()).unwrap_err();
    assert!(matches!(err, ClassifyError::Rejected(_)), "{err:?}");
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn short_results_are_rejected() {
    let stub = serve(vec![], BTreeSet::new(), true);
    let err = client(&stub.url, 0).classify(&one_request()).unwrap_err();
    assert!(matches!(err, ClassifyError::BadResponse(_)), "{err:?}");
}

#[test]
fn remote_oracle_matches_local_oracle() {
    let s = small_sample();
    let stub = serve(vec![], s.truth.instruction_starts.clone(), false);
    let remote = client(&stub.url, 0);
    let local = GroundTruthClassifier::new(s.truth.instruction_starts.clone());
    let config = PipelineConfig::default();
    let a = pipeline::run(&s.region, &remote, &config).unwrap();
    let b = pipeline::run(&s.region, &local, &config).unwrap();
    assert_eq!(a, b);
    assert!(stub.hits.load(Ordering::SeqCst) > 0);
}
