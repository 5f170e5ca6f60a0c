//! Chat-completion transport with bounded retries and record/replay fixtures.
//!
//! A [`Gateway`] runs either live (HTTP POST to a chat-completion endpoint)
//! or in replay mode, where responses are looked up in a fixture directory
//! by request fingerprint. Live gateways can record every response they
//! receive, so a recorded session replays later without network access.
//!
//! Because sampling at temperature > 0 is not deterministic, the same
//! request may legitimately be issued many times. Each issue carries a
//! variant index; fixtures are stored as `<fingerprint>_<variant>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "gpt-4o-2024-08-06";
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const API_KEY_VAR: &str = "AUGMENTOR_API_KEY";
pub const API_URL_VAR: &str = "AUGMENTOR_API_URL";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("no fixture recorded for {0}")]
    FixtureMiss(String),
    #[error("fixture {path} is corrupt: {reason}")]
    FixtureCorrupt { path: String, reason: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("request {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<GatewayError>,
    },
}

impl GatewayError {
    pub fn at(self, index: usize) -> GatewayError {
        GatewayError::AtIndex {
            index,
            source: Box::new(self),
        }
    }

    /// The underlying error with any index wrapping removed.
    pub fn root(&self) -> &GatewayError {
        match self {
            GatewayError::AtIndex { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
}

impl ChatRequest {
    pub fn new(
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
        temperature: f64,
    ) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_name: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        Ok(())
    }

    /// SHA-256 over a length-prefixed encoding of
    /// (model_name, temperature bits, system_prompt, user_prompt, max_tokens).
    pub fn fingerprint(&self) -> Fingerprint {
        fn field(h: &mut Sha256, bytes: &[u8]) {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        let mut h = Sha256::new();
        h.update(b"augmentor-fingerprint-v1");
        field(&mut h, self.model_name.as_bytes());
        // -0.0 and 0.0 are the same setting
        let t = if self.temperature == 0.0 {
            0.0f64
        } else {
            self.temperature
        };
        field(&mut h, &t.to_bits().to_le_bytes());
        field(&mut h, self.system_prompt.as_bytes());
        field(&mut h, self.user_prompt.as_bytes());
        field(&mut h, &self.max_tokens.to_le_bytes());
        Fingerprint(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(pub String);

impl Fingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn variant_key(&self, variant: usize) -> String {
        format!("{}#{}", self.0, variant)
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub raw_text: String,
    pub request_fingerprint: Fingerprint,
    pub latency_ms: u64,
    pub mode: Mode,
}

/// One issue of a request. Identical requests are distinguished by `variant`.
#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub request: ChatRequest,
    pub variant: usize,
}

impl Call {
    /// Numbers repeated requests by their order of occurrence: the k-th
    /// occurrence of a fingerprint gets variant `k`.
    pub fn numbered(requests: Vec<ChatRequest>) -> Vec<Call> {
        let mut seen: HashMap<Fingerprint, usize> = HashMap::new();
        requests
            .into_iter()
            .map(|request| {
                let n = seen.entry(request.fingerprint()).or_insert(0);
                let variant = *n;
                *n += 1;
                Call { request, variant }
            })
            .collect()
    }
}

/// Failure reported by a single transport attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportFailure {
    Status { code: u16, body: String },
    Network(String),
    Decode(String),
}

impl TransportFailure {
    fn is_transient(&self) -> bool {
        match self {
            TransportFailure::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportFailure::Network(_) => true,
            TransportFailure::Decode(_) => false,
        }
    }
}

/// A single-attempt chat-completion sender. Retries live in [`Gateway`].
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportFailure>;
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

/// Builds the chat-completion JSON body for a request.
pub fn wire_body(req: &ChatRequest) -> serde_json::Value {
    serde_json::to_value(WireRequest {
        model: &req.model_name,
        messages: [
            WireMessage {
                role: "system",
                content: &req.system_prompt,
            },
            WireMessage {
                role: "user",
                content: &req.user_prompt,
            },
        ],
        temperature: req.temperature,
        max_tokens: req.max_tokens,
    })
    .expect("request serializes")
}

/// Extracts the assistant text from a chat-completion response body.
pub fn parse_wire_response(body: &str) -> Result<String, TransportFailure> {
    let parsed: WireResponse =
        serde_json::from_str(body).map_err(|e| TransportFailure::Decode(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportFailure::Decode("response has no assistant content".into()))
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(
        url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: url.into(),
            api_key,
        })
    }

    /// Reads the endpoint and credential from `AUGMENTOR_API_URL` and
    /// `AUGMENTOR_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let url = std::env::var(API_URL_VAR)
            .map_err(|_| GatewayError::Transport(format!("{API_URL_VAR} is not set")))?;
        let key = std::env::var(API_KEY_VAR)
            .map_err(|_| GatewayError::Auth(format!("{API_KEY_VAR} is not set")))?;
        Self::new(url, Some(key), Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportFailure> {
        let mut builder = self.client.post(&self.url).json(&wire_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| TransportFailure::Network(e.to_string()))?;
        let code = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| TransportFailure::Network(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(TransportFailure::Status { code, body });
        }
        parse_wire_response(&body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub multiplier: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_delay_ms: 500,
            multiplier: 2.0,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based). Nondecreasing in `retry`.
    pub fn delay(&self, retry: u32) -> Duration {
        let mult = self.multiplier.max(1.0);
        let raw = self.initial_delay_ms as f64 * mult.powi(retry as i32);
        Duration::from_millis(raw.min(self.max_delay_ms as f64) as u64)
    }
}

#[derive(Debug, Clone)]
pub struct FixtureEntry {
    pub fingerprint: Fingerprint,
    pub variant: usize,
    pub request: ChatRequest,
    pub raw_text: String,
}

#[derive(Serialize, Deserialize)]
struct FixtureFile {
    fingerprint: Fingerprint,
    variant: usize,
    request: ChatRequest,
    raw_text: String,
}

/// Directory of recorded responses, one JSON file per fingerprint variant.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FixtureStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, fp: &Fingerprint, variant: usize) -> PathBuf {
        self.dir.join(format!("{}_{}.json", fp.as_str(), variant))
    }

    pub fn load(&self, req: &ChatRequest, variant: usize) -> Result<FixtureEntry, GatewayError> {
        let fp = req.fingerprint();
        let path = self.path(&fp, variant);
        let body = match fs::read_to_string(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::FixtureMiss(fp.variant_key(variant)))
            }
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: String| GatewayError::FixtureCorrupt {
            path: path.display().to_string(),
            reason,
        };
        let file: FixtureFile = serde_json::from_str(&body).map_err(|e| corrupt(e.to_string()))?;
        if file.fingerprint != fp || file.request.fingerprint() != fp {
            return Err(corrupt(
                "fingerprint does not match the stored request".into(),
            ));
        }
        Ok(FixtureEntry {
            fingerprint: file.fingerprint,
            variant: file.variant,
            request: file.request,
            raw_text: file.raw_text,
        })
    }

    pub fn write(
        &self,
        req: &ChatRequest,
        variant: usize,
        raw_text: &str,
    ) -> Result<PathBuf, GatewayError> {
        let fp = req.fingerprint();
        let path = self.path(&fp, variant);
        let file = FixtureFile {
            fingerprint: fp,
            variant,
            request: req.clone(),
            raw_text: raw_text.to_string(),
        };
        let mut body = serde_json::to_string_pretty(&file).expect("fixture serializes");
        body.push('\n');
        fs::write(&path, body)?;
        Ok(path)
    }

    /// Number of fixture files in the directory.
    pub fn len(&self) -> Result<usize, GatewayError> {
        if !self.dir.exists() {
            return Ok(0);
        }
        let mut n = 0;
        for entry in fs::read_dir(&self.dir)? {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()) == Some("json") {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool, GatewayError> {
        Ok(self.len()? == 0)
    }
}

/// Counting semaphore bounding in-flight requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

enum Backend {
    Live {
        transport: Box<dyn Transport>,
        retry: RetryPolicy,
        record: Option<FixtureStore>,
    },
    Replay(FixtureStore),
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub struct Gateway {
    backend: Backend,
    in_flight: InFlight,
    sleeper: Sleeper,
    attempts: AtomicUsize,
}

impl Gateway {
    pub fn live(transport: Box<dyn Transport>, retry: RetryPolicy) -> Self {
        Gateway {
            backend: Backend::Live {
                transport,
                retry,
                record: None,
            },
            in_flight: InFlight::new(DEFAULT_MAX_IN_FLIGHT),
            sleeper: Arc::new(std::thread::sleep),
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn replay(store: FixtureStore) -> Self {
        Gateway {
            backend: Backend::Replay(store),
            in_flight: InFlight::new(DEFAULT_MAX_IN_FLIGHT),
            sleeper: Arc::new(std::thread::sleep),
            attempts: AtomicUsize::new(0),
        }
    }

    /// Persists every live response into `store`. No effect in replay mode.
    pub fn recording_into(mut self, store: FixtureStore) -> Self {
        if let Backend::Live { record, .. } = &mut self.backend {
            *record = Some(store);
        }
        self
    }

    pub fn with_max_in_flight(mut self, k: usize) -> Self {
        self.in_flight = InFlight::new(k);
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn mode(&self) -> Mode {
        match self.backend {
            Backend::Live { .. } => Mode::Live,
            Backend::Replay(_) => Mode::Replay,
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight.limit
    }

    /// Total transport attempts made by this gateway, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete_variant(req, 0)
    }

    pub fn complete_variant(
        &self,
        req: &ChatRequest,
        variant: usize,
    ) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let fp = req.fingerprint();
        let _slot = self.in_flight.acquire();
        let started = Instant::now();
        let raw_text = match &self.backend {
            Backend::Replay(store) => store.load(req, variant)?.raw_text,
            Backend::Live {
                transport,
                retry,
                record,
            } => {
                let text = self.send_with_retry(transport.as_ref(), retry, req)?;
                if let Some(store) = record {
                    store.write(req, variant, &text)?;
                }
                text
            }
        };
        Ok(ChatResponse {
            raw_text,
            request_fingerprint: fp,
            latency_ms: started.elapsed().as_millis() as u64,
            mode: self.mode(),
        })
    }

    fn send_with_retry(
        &self,
        transport: &dyn Transport,
        retry: &RetryPolicy,
        req: &ChatRequest,
    ) -> Result<String, GatewayError> {
        let mut attempt: u32 = 0;
        loop {
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let failure = match transport.send(req) {
                Ok(text) => return Ok(text),
                Err(f) => f,
            };
            match &failure {
                TransportFailure::Status {
                    code: 401 | 403,
                    body,
                } => return Err(GatewayError::Auth(excerpt(body))),
                f if f.is_transient() && attempt < retry.max_retries => {
                    let delay = retry.delay(attempt);
                    log::warn!(
                        "transient failure ({}), retry {}/{} in {:?}",
                        describe(f),
                        attempt + 1,
                        retry.max_retries,
                        delay
                    );
                    (self.sleeper)(delay);
                    attempt += 1;
                }
                TransportFailure::Status { code: 429, .. } => {
                    return Err(GatewayError::RateLimited {
                        attempts: attempt + 1,
                    })
                }
                f => return Err(GatewayError::Transport(describe(f))),
            }
        }
    }

    /// Issues all calls with at most `max_in_flight` outstanding, returning
    /// results in call order.
    pub fn complete_all(&self, calls: &[Call]) -> Vec<Result<ChatResponse, GatewayError>> {
        let slots: Vec<Mutex<Option<Result<ChatResponse, GatewayError>>>> =
            calls.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.in_flight.limit.min(calls.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= calls.len() {
                        break;
                    }
                    let r = self
                        .complete_variant(&calls[i].request, calls[i].variant)
                        .map_err(|e| e.at(i));
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .expect("every call completed")
            })
            .collect()
    }
}

fn excerpt(s: &str) -> String {
    let mut out: String = s.chars().take(200).collect();
    if out.len() < s.len() {
        out.push('…');
    }
    out
}

fn describe(f: &TransportFailure) -> String {
    match f {
        TransportFailure::Status { code, body } => format!("HTTP {code}: {}", excerpt(body)),
        TransportFailure::Network(m) => format!("network: {m}"),
        TransportFailure::Decode(m) => format!("decode: {m}"),
    }
}

/// Issues `reqs` through a live gateway and stores every response in
/// `dir`, numbering repeated requests as variants.
pub fn record_session(
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    reqs: Vec<ChatRequest>,
    dir: &Path,
) -> Result<FixtureStore, GatewayError> {
    let store = FixtureStore::create(dir)?;
    let gw = Gateway::live(transport, retry).recording_into(store.clone());
    let calls = Call::numbered(reqs);
    for r in gw.complete_all(&calls) {
        r?;
    }
    Ok(store)
}
