//! Clients for the five backend roles over a fixed JSON wire contract.
//!
//! | route               | request                                                     | response                    |
//! |---------------------|-------------------------------------------------------------|-----------------------------|
//! | `POST /v1/t2i`         | `{"prompt","seed","width","height"}`                        | `{"image_png_b64","model_id"}` |
//! | `POST /v1/mm-generate` | `{"prompt","images_png_b64":[..],"max_new_tokens","temperature"}` | `{"text","model_id"}` |
//! | `POST /v1/generate`    | `{"prompt","max_new_tokens","temperature"}`                 | `{"text","model_id"}`       |
//! | `POST /v1/embed`       | `{"texts":[..]}`                                            | `{"vectors":[[..]],"dim"}`  |
//! | `POST /v1/segment`     | `{"text","parts","token_cap"}`                              | `{"token_indices":[..]}`    |
//!
//! Non-200 responses carry `{"error": string}`. Every client goes through a
//! [`Transport`]: either HTTP or the in-process [`mock::MockBackends`], so the
//! retry and validation logic is identical for both.

pub mod http;
pub mod mock;
pub mod server;
pub mod wire;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datamodel::{BackendRole, DecodeParams, ExperimentSpec};
use crate::imaging::{self, ImageArtifact};
use crate::segmentation::count_tokens;
use crate::{Error, Result};

use self::http::HttpTransport;
use self::mock::{MockBackends, MockFixture};
use self::wire::*;

/// Environment variable holding the optional bearer token for HTTP backends.
pub const TOKEN_ENV: &str = "MH_TOKEN";

const MAX_BACKOFF_MS: u64 = 5_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub role: BackendRole,
    /// `http(s)://host:port` or `inproc` for the in-process mock.
    pub endpoint: String,
    pub model_id: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// Base delay of the exponential backoff between retries.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_backoff_ms() -> u64 {
    100
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Config("backend id must not be empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config(format!("backend `{}`: timeout_ms must be > 0", self.id)));
        }
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config(format!("backend `{}`: endpoint is empty", self.id)));
        }
        Ok(())
    }

    pub fn is_inproc(&self) -> bool {
        self.endpoint.trim_end_matches(':') == "inproc"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }
}

/// A backend result plus what the backend reported about itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated<T> {
    pub value: T,
    pub model_id: String,
    pub retried: bool,
}

/// Outcome of asking the segment proposer for split points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitProposal {
    Indices(Vec<usize>),
    /// The reply was unusable; callers fall back to even token splits.
    FallbackNeeded(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportError {
    Timeout(String),
    Connect(String),
    Status { code: u16, message: String },
    Decode(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Timeout(_) | TransportError::Connect(_) => true,
            TransportError::Status { code, .. } => *code >= 500 || *code == 429,
            TransportError::Decode(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Timeout(m) => write!(f, "timeout: {m}"),
            TransportError::Connect(m) => write!(f, "transport: {m}"),
            TransportError::Status { code, message } => write!(f, "HTTP {code}: {message}"),
            TransportError::Decode(m) => write!(f, "decode: {m}"),
        }
    }
}

pub trait Transport: Send + Sync {
    fn post(&self, route: Route, body: &Value) -> std::result::Result<Value, TransportError>;
}

pub trait ImageGenerator: Send + Sync {
    fn model_id(&self) -> &str;
    fn generate_image(
        &self,
        prompt: &str,
        seed: u64,
        width: u32,
        height: u32,
    ) -> Result<Generated<ImageArtifact>>;
}

pub trait TextGenerator: Send + Sync {
    fn generate(
        &self,
        prompt: &str,
        images: &[ImageArtifact],
        decode: &DecodeParams,
    ) -> Result<Generated<String>>;
}

pub trait Embedder: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

pub trait SplitProposer: Send + Sync {
    fn propose_splits(&self, text: &str, parts: usize, token_cap: usize) -> Result<SplitProposal>;
}

/// Typed client for one backend descriptor.
#[derive(Clone)]
pub struct BackendClient {
    descriptor: BackendDescriptor,
    transport: Arc<dyn Transport>,
}

impl std::fmt::Debug for BackendClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendClient")
            .field("descriptor", &self.descriptor)
            .finish_non_exhaustive()
    }
}

impl BackendClient {
    pub fn new(descriptor: BackendDescriptor, transport: Arc<dyn Transport>) -> Self {
        Self {
            descriptor,
            transport,
        }
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        route: Route,
        req: &Req,
    ) -> Result<(Resp, bool)> {
        let body = serde_json::to_value(req)?;
        let max_attempts = self.descriptor.max_retries.saturating_add(1);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.transport.post(route, &body) {
                Ok(v) => {
                    let resp = serde_json::from_value(v).map_err(|e| Error::Protocol {
                        backend: self.descriptor.id.clone(),
                        message: format!("{}: {e}", route.path()),
                    })?;
                    return Ok((resp, attempt > 1));
                }
                Err(e) if e.is_retryable() && attempt < max_attempts => {
                    let shift = (attempt - 1).min(16);
                    let delay = self
                        .descriptor
                        .backoff_ms
                        .saturating_mul(1u64 << shift)
                        .min(MAX_BACKOFF_MS);
                    thread::sleep(Duration::from_millis(delay));
                }
                Err(e) if e.is_retryable() => {
                    return Err(Error::BackendUnavailable {
                        backend: self.descriptor.id.clone(),
                        attempts: attempt,
                        message: e.to_string(),
                        context: None,
                    })
                }
                Err(TransportError::Status { code, message }) => {
                    return Err(Error::BackendRejected {
                        backend: self.descriptor.id.clone(),
                        status: code,
                        message,
                        context: None,
                    })
                }
                Err(e) => {
                    return Err(Error::Protocol {
                        backend: self.descriptor.id.clone(),
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    fn protocol(&self, message: impl Into<String>) -> Error {
        Error::Protocol {
            backend: self.descriptor.id.clone(),
            message: message.into(),
        }
    }

    pub fn t2i_generate(
        &self,
        prompt: &str,
        seed: u64,
        width: u32,
        height: u32,
    ) -> Result<Generated<ImageArtifact>> {
        if prompt.trim().is_empty() {
            return Err(Error::Precondition("t2i prompt must not be empty".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Precondition("image width and height must be positive".into()));
        }
        let req = T2iRequest {
            prompt: prompt.to_string(),
            seed,
            width,
            height,
        };
        let (resp, retried): (T2iResponse, bool) = self.call(Route::T2i, &req)?;
        let bytes = B64
            .decode(resp.image_png_b64.as_bytes())
            .map_err(|e| self.protocol(format!("image is not base64: {e}")))?;
        let key = imaging::cache_key(&self.descriptor.model_id, prompt, seed, width, height);
        let artifact = ImageArtifact::from_png(bytes, key)?;
        if (artifact.width, artifact.height) != (width, height) {
            return Err(self.protocol(format!(
                "requested {width}x{height} image, got {}x{}",
                artifact.width, artifact.height
            )));
        }
        Ok(Generated {
            value: artifact,
            model_id: resp.model_id,
            retried,
        })
    }

    pub fn mm_generate(
        &self,
        prompt: &str,
        images: &[ImageArtifact],
        decode: &DecodeParams,
    ) -> Result<Generated<String>> {
        let req = MmGenerateRequest {
            prompt: prompt.to_string(),
            images_png_b64: images.iter().map(|i| B64.encode(i.bytes())).collect(),
            max_new_tokens: decode.max_new_tokens,
            temperature: decode.temperature,
        };
        let (resp, retried): (TextResponse, bool) = self.call(Route::MmGenerate, &req)?;
        Ok(Generated {
            value: resp.text,
            model_id: resp.model_id,
            retried,
        })
    }

    pub fn text_generate(&self, prompt: &str, decode: &DecodeParams) -> Result<Generated<String>> {
        let req = GenerateRequest {
            prompt: prompt.to_string(),
            max_new_tokens: decode.max_new_tokens,
            temperature: decode.temperature,
        };
        let (resp, retried): (TextResponse, bool) = self.call(Route::Generate, &req)?;
        Ok(Generated {
            value: resp.text,
            model_id: resp.model_id,
            retried,
        })
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::Precondition("embed_texts needs at least one text".into()));
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Precondition("embed_texts rejects empty strings".into()));
        }
        let req = EmbedRequest {
            texts: texts.to_vec(),
        };
        let (resp, _): (EmbedResponse, bool) = self.call(Route::Embed, &req)?;
        if resp.vectors.len() != texts.len() {
            return Err(self.protocol(format!(
                "{} texts but {} vectors",
                texts.len(),
                resp.vectors.len()
            )));
        }
        let vectors: Vec<EmbeddingVector> =
            resp.vectors.into_iter().map(EmbeddingVector::new).collect();
        if vectors.iter().any(|v| v.dim() != resp.dim || v.dim() == 0) {
            return Err(self.protocol(format!("vectors do not all have dim {}", resp.dim)));
        }
        if vectors.iter().any(EmbeddingVector::is_zero) {
            return Err(self.protocol("backend returned an all-zero embedding"));
        }
        Ok(vectors)
    }

    pub fn propose_splits(&self, text: &str, parts: usize, token_cap: usize) -> Result<SplitProposal> {
        if parts < 2 {
            return Err(Error::Precondition("propose_splits needs parts >= 2".into()));
        }
        let req = SegmentRequest {
            text: text.to_string(),
            parts,
            token_cap,
        };
        let (resp, _): (SegmentResponse, bool) = self.call(Route::Segment, &req)?;
        let n = count_tokens(text).len();
        Ok(match validate_split_indices(&resp.token_indices, parts, n) {
            Ok(ix) => SplitProposal::Indices(ix),
            Err(reason) => SplitProposal::FallbackNeeded(reason),
        })
    }
}

/// Accepts `parts - 1` strictly increasing indices inside `(0, n_tokens)`.
pub fn validate_split_indices(
    raw: &[i64],
    parts: usize,
    n_tokens: usize,
) -> std::result::Result<Vec<usize>, String> {
    if raw.len() + 1 != parts {
        return Err(format!("expected {} indices, got {}", parts - 1, raw.len()));
    }
    let mut out = Vec::with_capacity(raw.len());
    for &i in raw {
        if i <= 0 || i as u64 >= n_tokens as u64 {
            return Err(format!("index {i} outside (0, {n_tokens})"));
        }
        let i = i as usize;
        if out.last().is_some_and(|&prev| i <= prev) {
            return Err(format!("indices are not strictly increasing at {i}"));
        }
        out.push(i);
    }
    Ok(out)
}

impl ImageGenerator for BackendClient {
    fn model_id(&self) -> &str {
        &self.descriptor.model_id
    }

    fn generate_image(
        &self,
        prompt: &str,
        seed: u64,
        width: u32,
        height: u32,
    ) -> Result<Generated<ImageArtifact>> {
        self.t2i_generate(prompt, seed, width, height)
    }
}

impl TextGenerator for BackendClient {
    fn generate(
        &self,
        prompt: &str,
        images: &[ImageArtifact],
        decode: &DecodeParams,
    ) -> Result<Generated<String>> {
        match self.descriptor.role {
            BackendRole::Mllm => self.mm_generate(prompt, images, decode),
            _ => self.text_generate(prompt, decode),
        }
    }
}

impl Embedder for BackendClient {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        BackendClient::embed_texts(self, texts)
    }
}

impl SplitProposer for BackendClient {
    fn propose_splits(&self, text: &str, parts: usize, token_cap: usize) -> Result<SplitProposal> {
        BackendClient::propose_splits(self, text, parts, token_cap)
    }
}

/// On-disk backend configuration: descriptors plus an optional fixture for
/// `inproc` endpoints.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BackendsFile {
    pub backends: Vec<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockFixture>,
}

impl BackendsFile {
    /// One descriptor per role, all pointing at `endpoint`.
    pub fn uniform(endpoint: &str, fixture: Option<MockFixture>) -> Self {
        let models = fixture.clone().unwrap_or_default();
        let backends = BackendRole::ALL
            .iter()
            .map(|role| BackendDescriptor {
                id: role.as_str().to_string(),
                role: *role,
                endpoint: endpoint.to_string(),
                model_id: models.model_id(*role).to_string(),
                timeout_ms: 10_000,
                max_retries: 2,
                backoff_ms: 10,
            })
            .collect();
        Self {
            backends,
            mock: fixture,
        }
    }
}

/// Resolved clients keyed by descriptor id.
#[derive(Clone, Debug)]
pub struct BackendSet {
    clients: BTreeMap<String, BackendClient>,
    mock: Option<Arc<MockBackends>>,
}

impl BackendSet {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let file: BackendsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))?;
        Self::from_file(file, std::env::var(TOKEN_ENV).ok())
    }

    pub fn from_file(file: BackendsFile, bearer: Option<String>) -> Result<Self> {
        let mock = match &file.mock {
            Some(f) => Some(Arc::new(MockBackends::new(f.clone())?)),
            None => None,
        };
        let mut clients = BTreeMap::new();
        for d in file.backends {
            d.validate()?;
            let transport: Arc<dyn Transport> = if d.is_inproc() {
                let m = mock.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "backend `{}` is inproc but the file has no `mock` fixture",
                        d.id
                    ))
                })?;
                m.clone()
            } else if d.endpoint.starts_with("http://") || d.endpoint.starts_with("https://") {
                Arc::new(HttpTransport::new(
                    &d.endpoint,
                    Duration::from_millis(d.timeout_ms),
                    bearer.clone(),
                )?)
            } else {
                return Err(Error::Config(format!(
                    "backend `{}`: unsupported endpoint `{}`",
                    d.id, d.endpoint
                )));
            };
            if clients.contains_key(&d.id) {
                return Err(Error::Config(format!("duplicate backend id `{}`", d.id)));
            }
            clients.insert(d.id.clone(), BackendClient::new(d, transport));
        }
        Ok(Self { clients, mock })
    }

    /// All five roles served in-process by the given fixture.
    pub fn in_process(fixture: MockFixture) -> Result<Self> {
        Self::from_file(BackendsFile::uniform("inproc", Some(fixture)), None)
    }

    /// All five roles at one HTTP endpoint (e.g. a running mock server).
    pub fn http(base_url: &str) -> Result<Self> {
        Self::from_file(BackendsFile::uniform(base_url, None), std::env::var(TOKEN_ENV).ok())
    }

    pub fn get(&self, id: &str) -> Result<&BackendClient> {
        self.clients
            .get(id)
            .ok_or_else(|| Error::Config(format!("no backend with id `{id}`")))
    }

    /// The client a spec assigns to `role`, checked for the right role.
    pub fn for_role(&self, spec: &ExperimentSpec, role: BackendRole) -> Result<&BackendClient> {
        let client = self.get(spec.backend_id(role))?;
        if client.descriptor.role != role {
            return Err(Error::Config(format!(
                "backend `{}` has role {} but is used as {role}",
                client.descriptor.id, client.descriptor.role
            )));
        }
        Ok(client)
    }

    pub fn mock(&self) -> Option<&Arc<MockBackends>> {
        self.mock.as_ref()
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        self.clients.values().map(|c| c.descriptor.clone()).collect()
    }
}
