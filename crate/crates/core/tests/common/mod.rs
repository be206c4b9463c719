#![allow(dead_code)]

pub mod oracles;

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use raicl::embedstore::{EmbeddingRecord, LoadMode, Modality};
use raicl::modelgw::MockPolicy;
use raicl::runner::{self, RunConfig};
use raicl::{DatasetManifest, LabelSet, Sample, Store};
use serde_json::{json, Value};

/// Writes a synthetic dataset under `dir` and returns a mock config for it.
pub fn synth_config(
    dir: &Path,
    classes: usize,
    per_class: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> RunConfig {
    let (manifest, store) =
        runner::generate_synthetic(classes, per_class, dim, sigma, seed).unwrap();
    let paths = runner::write_synthetic(dir, &manifest, &store).unwrap();
    let mut cfg = RunConfig::new(paths.manifest, paths.embeddings, dir.join("run"));
    cfg.mock = Some(MockPolicy::FirstDemoLabel);
    cfg
}

/// Writes a manifest and a random store with the given per-label counts.
pub fn labeled_fixture(dir: &Path, counts: &[(&str, usize)], dim: usize, seed: u64) -> RunConfig {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let png = dir.join("case.png");
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(&png, runner::PLACEHOLDER_PNG).unwrap();
    for (label, n) in counts {
        for i in 0..*n {
            let id = format!("{label}-{i:04}");
            samples.push(Sample {
                id: id.clone(),
                image_refs: vec![png.clone()],
                text: format!("report for {id}"),
                labels: vec![label.to_string()],
            });
            records.push(EmbeddingRecord {
                sample_id: id,
                encoder_id: "random".into(),
                modality: Modality::Image,
                dim,
                vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            });
        }
    }
    let manifest = DatasetManifest {
        name: "fixture".into(),
        label_set: LabelSet::new(counts.iter().map(|(l, _)| *l)).unwrap(),
        samples,
    };
    let store = Store::from_records(records, LoadMode::Normalize).unwrap();
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, manifest.to_json(dir)).unwrap();
    let emb_path = dir.join("embeddings.jsonl");
    store.write_jsonl(&emb_path).unwrap();
    let mut cfg = RunConfig::new(manifest_path, emb_path, dir.join("run"));
    cfg.mock = Some(MockPolicy::FirstDemoLabel);
    cfg
}

/// A received request: headers (lower-cased names) and the JSON body.
#[derive(Debug, Clone)]
pub struct Received {
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

impl Received {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

type Responder = dyn Fn(&Value) -> (u16, String) + Send + Sync;

/// Minimal OpenAI-compatible server. Scripted responses are served first;
/// afterwards `fallback` answers every request.
pub struct StubServer {
    pub base_url: String,
    received: Arc<Mutex<Vec<Received>>>,
    script: Arc<Mutex<VecDeque<(u16, String)>>>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    handle: Option<JoinHandle<()>>,
}

pub fn completion(text: &str) -> String {
    json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 1, "total_tokens": 11},
    })
    .to_string()
}

/// Replies with the label of the demonstration round closest to the query,
/// or "unknown" when there are none.
pub fn echo_last_demo(body: &Value) -> (u16, String) {
    let label = body["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "assistant"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or("unknown")
        .to_owned();
    (200, completion(&label))
}

impl StubServer {
    pub fn start(fallback: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let received = Arc::new(Mutex::new(Vec::new()));
        let script = Arc::new(Mutex::new(VecDeque::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let fallback: Arc<Responder> = Arc::new(fallback);
        let handle = {
            let (received, script, stop) = (received.clone(), script.clone(), stop.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (received, script, fallback) =
                        (received.clone(), script.clone(), fallback.clone());
                    thread::spawn(move || serve(stream, &received, &script, fallback.as_ref()));
                }
            })
        };
        Self {
            base_url: format!("http://{addr}/v1"),
            received,
            script,
            stop,
            addr,
            handle: Some(handle),
        }
    }

    pub fn push_responses(&self, responses: impl IntoIterator<Item = (u16, String)>) {
        self.script.lock().unwrap().extend(responses);
    }

    pub fn requests(&self) -> Vec<Received> {
        self.received.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.received.lock().unwrap().len()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(
    stream: TcpStream,
    received: &Mutex<Vec<Received>>,
    script: &Mutex<VecDeque<(u16, String)>>,
    fallback: &Responder,
) {
    let mut reader = BufReader::new(stream);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_ascii_lowercase(), v.trim().to_owned()));
        }
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k == "content-length")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, payload) = {
        let mut rec = received.lock().unwrap();
        rec.push(Received {
            headers,
            body: body.clone(),
        });
        // pop under the same lock so scripted responses follow arrival order
        script.lock().unwrap().pop_front()
    }
    .unwrap_or_else(|| fallback(&body));
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let mut stream = reader.into_inner();
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}
