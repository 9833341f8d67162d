//! Line-delimited JSON protocol for out-of-process backends.
//!
//! Every message is one JSON object on one line. Requests are
//! `{"id":n,"method":m,"params":{..}}`; each is answered exactly once by
//! `{"id":n,"result":..}` or `{"id":n,"error":{"code":c,"message":..}}`.
//! Responses may arrive in any order and are matched by id. The first
//! exchange is always `hello`, which returns the endpoint's capabilities and
//! how many requests it accepts in flight.
//!
//! Numeric arrays (attention, embeddings) travel as base64 of little-endian
//! `f64`, tagged with `dtype` and `shape`.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    BackendError, ClassifierBackend, ClassifierCapabilities, EmbedderBackend,
    EmbedderCapabilities, FinetuneAck, GeneratorBackend, GeneratorCapabilities,
};
use crate::data::{Caption, ImageRef, StyleLabel};
use crate::distribution::LabelDistribution;
use crate::extractor::AttentionProfile;
use crate::generator::{assemble_prompt, EmotionPrompt, FineTunePair};
use crate::num::Scalar;
use crate::retriever::{EmbeddingVector, UNIT_TOLERANCE};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DTYPE_F64LE: &str = "f64le";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const BACKEND_FAILURE: i64 = -32000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: i64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "result")]
    Ok(Value),
    #[serde(rename = "error")]
    Err(WireError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelloParams {
    pub protocol: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelloResult {
    pub protocol: u32,
    /// Requests the endpoint accepts in flight on one connection.
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierCapabilities>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderCapabilities>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorCapabilities>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokensParams {
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub labels: Vec<StyleLabel>,
    pub probs: Vec<f64>,
}

/// A dense `f64` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn encode(shape: Vec<usize>, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: DTYPE_F64LE.into(),
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>, BackendError> {
        if self.dtype != DTYPE_F64LE {
            return Err(BackendError::Protocol(format!("unsupported dtype '{}'", self.dtype)));
        }
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| BackendError::Protocol(format!("tensor data: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 8 {
            return Err(BackendError::Protocol(format!(
                "tensor of shape {:?} carries {} bytes",
                self.shape,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionResult {
    /// Shape `[heads, layers, tokens]`.
    pub weights: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageParams {
    pub image_id: String,
    pub uri: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResult {
    pub vector: Tensor,
    /// Norm before normalization, when `vector` is already unit length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub prompt: String,
    pub style_phrase: Vec<String>,
    pub content: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneBeginParams {
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneItemParams {
    pub style_phrase: Vec<String>,
    pub content: Vec<String>,
    pub target: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Empty {}

// ---------------------------------------------------------------------------
// Client

struct Pending {
    waiting: HashMap<u64, Sender<Result<Value, BackendError>>>,
    closed: Option<String>,
}

struct Slots {
    free: Mutex<usize>,
    ready: Condvar,
}

impl Slots {
    fn acquire(&self, deadline: Instant) -> bool {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            free = self.ready.wait_timeout(free, deadline - now).expect("slot lock").0;
        }
        *free -= 1;
        true
    }

    fn release(&self) {
        *self.free.lock().expect("slot lock") += 1;
        self.ready.notify_one();
    }

    fn resize(&self, depth: usize) {
        *self.free.lock().expect("slot lock") = depth;
        self.ready.notify_all();
    }
}

enum Link {
    Process(Child),
    Tcp(TcpStream),
    Streams,
}

/// One connection to an endpoint. Safe to share between threads; at most
/// `depth` requests are in flight at once.
pub struct WireClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Mutex<Pending>>,
    slots: Slots,
    next_id: AtomicU64,
    timeout: Duration,
    hello: HelloResult,
    endpoint: Mutex<Link>,
}

fn fail_all(pending: &Mutex<Pending>, reason: String) {
    let mut p = pending.lock().expect("pending lock");
    for (_, tx) in p.waiting.drain() {
        let _ = tx.send(Err(BackendError::Transport(reason.clone())));
    }
    p.closed = Some(reason);
}

fn read_loop(reader: impl BufRead, pending: Arc<Mutex<Pending>>) {
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => return fail_all(&pending, format!("read failed: {e}")),
        };
        if line.trim().is_empty() {
            continue;
        }
        let response: Response = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => return fail_all(&pending, format!("malformed response line: {e}")),
        };
        let Some(id) = response.id else {
            if let Outcome::Err(e) = response.outcome {
                warn!("endpoint reported an uncorrelated error {}: {}", e.code, e.message);
            }
            continue;
        };
        let tx = pending.lock().expect("pending lock").waiting.remove(&id);
        match tx {
            Some(tx) => {
                let _ = tx.send(match response.outcome {
                    Outcome::Ok(v) => Ok(v),
                    Outcome::Err(e) => Err(BackendError::Remote {
                        code: e.code,
                        message: e.message,
                    }),
                });
            }
            None => warn!("dropping response to unknown or abandoned request {id}"),
        }
    }
    fail_all(&pending, "endpoint closed the connection".into());
}

impl WireClient {
    /// Starts the reader thread over `reader` and performs the handshake.
    pub fn over_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Self::start(Box::new(reader), Box::new(writer), timeout, Link::Streams)
    }

    /// Spawns `argv` and talks to it over its standard streams.
    pub fn spawn(argv: &[String], timeout: Duration) -> Result<Self, BackendError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| BackendError::Descriptor("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::start(Box::new(BufReader::new(stdout)), Box::new(stdin), timeout, Link::Process(child))
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, BackendError> {
        let transport = |e: io::Error| BackendError::Transport(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(transport)?
            .next()
            .ok_or_else(|| BackendError::Transport(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport)?);
        let writer = stream.try_clone().map_err(transport)?;
        Self::start(Box::new(reader), Box::new(writer), timeout, Link::Tcp(stream))
    }

    fn start(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        timeout: Duration,
        endpoint: Link,
    ) -> Result<Self, BackendError> {
        let pending = Arc::new(Mutex::new(Pending {
            waiting: HashMap::new(),
            closed: None,
        }));
        let shared = Arc::clone(&pending);
        thread::Builder::new()
            .name("wire-reader".into())
            .spawn(move || read_loop(reader, shared))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let mut client = Self {
            writer: Mutex::new(writer),
            pending,
            slots: Slots {
                free: Mutex::new(1),
                ready: Condvar::new(),
            },
            next_id: AtomicU64::new(1),
            timeout,
            hello: HelloResult {
                protocol: PROTOCOL_VERSION,
                depth: 1,
                classifier: None,
                embedder: None,
                generator: None,
            },
            endpoint: Mutex::new(endpoint),
        };
        let hello: HelloResult = client.call("hello", &HelloParams { protocol: PROTOCOL_VERSION })?;
        if hello.protocol != PROTOCOL_VERSION {
            return Err(BackendError::Capability(format!(
                "endpoint speaks protocol {}, expected {PROTOCOL_VERSION}",
                hello.protocol
            )));
        }
        if hello.depth == 0 {
            return Err(BackendError::Capability("endpoint declares depth 0".into()));
        }
        client.slots.resize(hello.depth);
        debug!("handshake complete: {hello:?}");
        client.hello = hello;
        Ok(client)
    }

    pub fn hello(&self) -> &HelloResult {
        &self.hello
    }

    /// Sends one request and waits for its response.
    pub fn call<P: Serialize, R: DeserializeOwned>(&self, method: &str, params: &P) -> Result<R, BackendError> {
        let deadline = Instant::now() + self.timeout;
        if !self.slots.acquire(deadline) {
            return Err(BackendError::Timeout(self.timeout));
        }
        let result = self.exchange(method, params, deadline);
        self.slots.release();
        let value = result?;
        serde_json::from_value(value)
            .map_err(|e| BackendError::Protocol(format!("{method} result: {e}")))
    }

    fn exchange<P: Serialize>(&self, method: &str, params: &P, deadline: Instant) -> Result<Value, BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = Request {
            id,
            method: method.to_string(),
            params: serde_json::to_value(params).map_err(|e| BackendError::Protocol(e.to_string()))?,
        };
        let mut line = serde_json::to_string(&request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        let (tx, rx) = mpsc::channel();
        {
            let mut p = self.pending.lock().expect("pending lock");
            if let Some(reason) = &p.closed {
                return Err(BackendError::Transport(reason.clone()));
            }
            p.waiting.insert(id, tx);
        }
        let written = {
            let mut w = self.writer.lock().expect("writer lock");
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if let Err(e) = written {
            self.pending.lock().expect("pending lock").waiting.remove(&id);
            return Err(BackendError::Transport(format!("write failed: {e}")));
        }
        match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").waiting.remove(&id);
                Err(BackendError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(BackendError::Transport("reader stopped".into()))
            }
        }
    }
}

impl Drop for WireClient {
    fn drop(&mut self) {
        match &mut *self.endpoint.lock().expect("endpoint lock") {
            Link::Process(child) => {
                let _ = child.kill();
                let _ = child.wait();
            }
            Link::Tcp(stream) => {
                let _ = stream.shutdown(Shutdown::Both);
            }
            Link::Streams => {}
        }
    }
}

/// Where to open connections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Address {
    Process(Vec<String>),
    Tcp(String),
}

impl Address {
    pub fn open(&self, timeout: Duration) -> Result<WireClient, BackendError> {
        match self {
            Self::Process(argv) => WireClient::spawn(argv, timeout),
            Self::Tcp(addr) => WireClient::connect_tcp(addr, timeout),
        }
    }
}

/// Connections to one endpoint. When the endpoint handles one request at a
/// time, one connection is opened per worker thread and each worker uses its
/// own; otherwise a single multiplexed connection is shared.
pub struct WirePool {
    clients: Vec<WireClient>,
}

impl WirePool {
    pub fn open(address: &Address, workers: usize, timeout: Duration) -> Result<Self, BackendError> {
        let first = address.open(timeout)?;
        let mut clients = vec![first];
        if clients[0].hello().depth == 1 {
            for _ in 1..workers.max(1) {
                let c = address.open(timeout)?;
                if c.hello() != clients[0].hello() {
                    return Err(BackendError::Capability(
                        "connections to the same endpoint advertise different capabilities".into(),
                    ));
                }
                clients.push(c);
            }
        }
        Ok(Self { clients })
    }

    pub fn single(client: WireClient) -> Self {
        Self { clients: vec![client] }
    }

    pub fn hello(&self) -> &HelloResult {
        self.clients[0].hello()
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self) -> &WireClient {
        let slot = rayon::current_thread_index().unwrap_or(0) % self.clients.len();
        &self.clients[slot]
    }
}

/// Classifier served by a remote endpoint.
pub struct RemoteClassifier {
    pool: WirePool,
    caps: ClassifierCapabilities,
}

impl RemoteClassifier {
    pub fn new(pool: WirePool) -> Result<Self, BackendError> {
        let caps = pool
            .hello()
            .classifier
            .clone()
            .ok_or_else(|| BackendError::Capability("endpoint offers no classifier".into()))?;
        Ok(Self { pool, caps })
    }
}

impl<T: Scalar> ClassifierBackend<T> for RemoteClassifier {
    fn capabilities(&self) -> &ClassifierCapabilities {
        &self.caps
    }

    fn classify(&self, tokens: &[String]) -> Result<LabelDistribution<T>, BackendError> {
        let r: ClassifyResult = self.pool.client().call("classify", &TokensParams { tokens: tokens.to_vec() })?;
        if r.labels.len() != r.probs.len() {
            return Err(BackendError::InvalidOutput("labels and probs differ in length".into()));
        }
        let entries = r.labels.into_iter().zip(r.probs.into_iter().map(T::from_f64_lossy)).collect();
        LabelDistribution::new(entries).map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }

    fn attention(&self, tokens: &[String]) -> Result<AttentionProfile<T>, BackendError> {
        let r: AttentionResult = self.pool.client().call("attention", &TokensParams { tokens: tokens.to_vec() })?;
        let &[h, l, t] = r.weights.shape.as_slice() else {
            return Err(BackendError::InvalidOutput(format!("attention shape {:?}", r.weights.shape)));
        };
        let values = r.weights.decode()?.into_iter().map(T::from_f64_lossy).collect();
        AttentionProfile::new(h, l, t, values).map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }
}

/// Embedder served by a remote endpoint.
pub struct RemoteEmbedder {
    pool: WirePool,
    caps: EmbedderCapabilities,
}

impl RemoteEmbedder {
    pub fn new(pool: WirePool) -> Result<Self, BackendError> {
        let caps = pool
            .hello()
            .embedder
            .clone()
            .ok_or_else(|| BackendError::Capability("endpoint offers no embedder".into()))?;
        Ok(Self { pool, caps })
    }

    fn decode<T: Scalar>(&self, r: EmbedResult) -> Result<EmbeddingVector<T>, BackendError> {
        if r.vector.shape != [self.caps.dimension] {
            return Err(BackendError::InvalidOutput(format!(
                "embedding shape {:?}, declared dimension {}",
                r.vector.shape, self.caps.dimension
            )));
        }
        let values = r.vector.decode()?;
        let invalid = |e: crate::retriever::RetrievalError| BackendError::InvalidOutput(e.to_string());
        let unit = (crate::num::l2_norm(&values) - 1.0).abs() <= UNIT_TOLERANCE;
        let v = match r.norm {
            Some(norm) if unit && norm > 0.0 => EmbeddingVector::from_unit(values, norm).map_err(invalid)?,
            _ => EmbeddingVector::new(values).map_err(invalid)?,
        };
        Ok(v.cast())
    }
}

impl<T: Scalar> EmbedderBackend<T> for RemoteEmbedder {
    fn capabilities(&self) -> &EmbedderCapabilities {
        &self.caps
    }

    fn embed_text(&self, tokens: &[String]) -> Result<EmbeddingVector<T>, BackendError> {
        let r = self.pool.client().call("embed_text", &TokensParams { tokens: tokens.to_vec() })?;
        self.decode(r)
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector<T>, BackendError> {
        let params = ImageParams {
            image_id: image.id.clone(),
            uri: image.uri.clone(),
        };
        let r = self.pool.client().call("embed_image", &params)?;
        self.decode(r)
    }
}

/// Generator served by a remote endpoint.
pub struct RemoteGenerator {
    pool: WirePool,
    caps: GeneratorCapabilities,
}

impl RemoteGenerator {
    pub fn new(pool: WirePool) -> Result<Self, BackendError> {
        let caps = pool
            .hello()
            .generator
            .ok_or_else(|| BackendError::Capability("endpoint offers no generator".into()))?;
        Ok(Self { pool, caps })
    }
}

impl GeneratorBackend for RemoteGenerator {
    fn capabilities(&self) -> &GeneratorCapabilities {
        &self.caps
    }

    fn generate(&self, prompt: &EmotionPrompt, seed: u64) -> Result<Vec<String>, BackendError> {
        let params = GenerateParams {
            prompt: prompt.rendered().to_string(),
            style_phrase: prompt.style_phrase().to_vec(),
            content: prompt.content().to_vec(),
            seed,
        };
        let r: GenerateResult = self.pool.client().call("generate", &params)?;
        Ok(r.tokens)
    }

    fn finetune(&self, pairs: &[FineTunePair]) -> Result<FinetuneAck, BackendError> {
        // The session must stay on one connection.
        let client = &self.pool.clients[0];
        let _: Empty = client.call("finetune_begin", &FinetuneBeginParams { count: pairs.len() })?;
        for p in pairs {
            let item = FinetuneItemParams {
                style_phrase: p.prompt.style_phrase().to_vec(),
                content: p.prompt.content().to_vec(),
                target: p.target.raw().to_string(),
            };
            let _: Empty = client.call("finetune_item", &item)?;
        }
        client.call("finetune_end", &Empty {})
    }
}

// ---------------------------------------------------------------------------
// Server

/// Answers protocol requests with local backends. One instance per
/// connection; requests are handled in arrival order.
pub struct WireServer<'a> {
    pub classifier: Option<&'a dyn ClassifierBackend<f64>>,
    pub embedder: Option<&'a dyn EmbedderBackend<f64>>,
    pub generator: Option<&'a dyn GeneratorBackend>,
    pub depth: usize,
    finetune: Option<(usize, Vec<FineTunePair>)>,
}

fn error(id: Option<u64>, code: i64, message: impl Into<String>) -> Response {
    Response {
        id,
        outcome: Outcome::Err(WireError {
            code,
            message: message.into(),
        }),
    }
}

type Handled = Result<Value, (i64, String)>;

fn params<P: DeserializeOwned>(v: Value) -> Result<P, (i64, String)> {
    serde_json::from_value(v).map_err(|e| (INVALID_PARAMS, e.to_string()))
}

fn ok<R: Serialize>(r: R) -> Handled {
    serde_json::to_value(r).map_err(|e| (BACKEND_FAILURE, e.to_string()))
}

fn backend(e: BackendError) -> (i64, String) {
    (BACKEND_FAILURE, e.to_string())
}

fn missing(what: &str) -> (i64, String) {
    (METHOD_NOT_FOUND, format!("this endpoint has no {what}"))
}

impl<'a> WireServer<'a> {
    pub fn new(
        classifier: Option<&'a dyn ClassifierBackend<f64>>,
        embedder: Option<&'a dyn EmbedderBackend<f64>>,
        generator: Option<&'a dyn GeneratorBackend>,
    ) -> Self {
        Self {
            classifier,
            embedder,
            generator,
            depth: 1,
            finetune: None,
        }
    }

    pub fn hello_result(&self) -> HelloResult {
        HelloResult {
            protocol: PROTOCOL_VERSION,
            depth: self.depth,
            classifier: self.classifier.map(|c| c.capabilities().clone()),
            embedder: self.embedder.map(|e| e.capabilities().clone()),
            generator: self.generator.map(|g| *g.capabilities()),
        }
    }

    /// Handles one request line and returns the response line, without the
    /// trailing newline. Blank lines produce nothing.
    pub fn handle_line(&mut self, line: &str) -> Option<String> {
        if line.trim().is_empty() {
            return None;
        }
        let response = match serde_json::from_str::<Value>(line) {
            Err(e) => error(None, PARSE_ERROR, e.to_string()),
            Ok(value) => {
                let id = value.get("id").and_then(Value::as_u64);
                match serde_json::from_value::<Request>(value) {
                    Err(e) => error(id, INVALID_REQUEST, e.to_string()),
                    Ok(req) => {
                        let id = Some(req.id);
                        match self.dispatch(&req.method, req.params) {
                            Ok(v) => Response { id, outcome: Outcome::Ok(v) },
                            Err((code, message)) => error(id, code, message),
                        }
                    }
                }
            }
        };
        Some(serde_json::to_string(&response).expect("response serializes"))
    }

    fn dispatch(&mut self, method: &str, p: Value) -> Handled {
        match method {
            "hello" => {
                let hp: HelloParams = params(p)?;
                if hp.protocol != PROTOCOL_VERSION {
                    return Err((INVALID_PARAMS, format!("unsupported protocol {}", hp.protocol)));
                }
                ok(self.hello_result())
            }
            "classify" => {
                let c = self.classifier.ok_or_else(|| missing("classifier"))?;
                let tp: TokensParams = params(p)?;
                let d = c.classify(&tp.tokens).map_err(backend)?;
                ok(ClassifyResult {
                    labels: d.labels().cloned().collect(),
                    probs: d.iter().map(|(_, p)| p).collect(),
                })
            }
            "attention" => {
                let c = self.classifier.ok_or_else(|| missing("classifier"))?;
                let tp: TokensParams = params(p)?;
                let prof = c.attention(&tp.tokens).map_err(backend)?;
                let flat: Vec<f64> = prof.to_nested().into_iter().flatten().flatten().collect();
                ok(AttentionResult {
                    weights: Tensor::encode(vec![prof.head_count(), prof.layer_count(), prof.token_count()], &flat),
                })
            }
            "embed_text" => {
                let e = self.embedder.ok_or_else(|| missing("embedder"))?;
                let tp: TokensParams = params(p)?;
                let v = e.embed_text(&tp.tokens).map_err(backend)?;
                ok(embed_result(&v))
            }
            "embed_image" => {
                let e = self.embedder.ok_or_else(|| missing("embedder"))?;
                let ip: ImageParams = params(p)?;
                let v = e.embed_image(&ImageRef::new(ip.image_id, ip.uri)).map_err(backend)?;
                ok(embed_result(&v))
            }
            "generate" => {
                let g = self.generator.ok_or_else(|| missing("generator"))?;
                let gp: GenerateParams = params(p)?;
                let prompt = assemble_prompt(&gp.style_phrase, &gp.content)
                    .map_err(|e| (INVALID_PARAMS, e.to_string()))?;
                if prompt.rendered() != gp.prompt {
                    return Err((INVALID_PARAMS, "prompt does not match its parts".into()));
                }
                ok(GenerateResult {
                    tokens: g.generate(&prompt, gp.seed).map_err(backend)?,
                })
            }
            "finetune_begin" => {
                self.generator.ok_or_else(|| missing("generator"))?;
                let bp: FinetuneBeginParams = params(p)?;
                self.finetune = Some((bp.count, Vec::with_capacity(bp.count)));
                ok(Empty {})
            }
            "finetune_item" => {
                let ip: FinetuneItemParams = params(p)?;
                let Some((_, items)) = self.finetune.as_mut() else {
                    return Err((INVALID_REQUEST, "finetune_item outside a session".into()));
                };
                let prompt = assemble_prompt(&ip.style_phrase, &ip.content)
                    .map_err(|e| (INVALID_PARAMS, e.to_string()))?;
                let target = Caption::parse(ip.target, &Default::default())
                    .map_err(|e| (INVALID_PARAMS, e.to_string()))?;
                items.push(FineTunePair { prompt, target });
                ok(Empty {})
            }
            "finetune_end" => {
                let g = self.generator.ok_or_else(|| missing("generator"))?;
                let Some((count, items)) = self.finetune.take() else {
                    return Err((INVALID_REQUEST, "finetune_end outside a session".into()));
                };
                if items.len() != count {
                    return Err((INVALID_PARAMS, format!("announced {count} items, received {}", items.len())));
                }
                ok(g.finetune(&items).map_err(backend)?)
            }
            other => Err((METHOD_NOT_FOUND, format!("unknown method '{other}'"))),
        }
    }

    /// Serves requests from `input` until it closes.
    pub fn serve(&mut self, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
        for line in input.lines() {
            if let Some(resp) = self.handle_line(&line?) {
                output.write_all(resp.as_bytes())?;
                output.write_all(b"\n")?;
                output.flush()?;
            }
        }
        Ok(())
    }
}

fn embed_result(v: &EmbeddingVector<f64>) -> EmbedResult {
    EmbedResult {
        vector: Tensor::encode(vec![v.dimension()], v.values()),
        norm: Some(v.norm()),
    }
}
