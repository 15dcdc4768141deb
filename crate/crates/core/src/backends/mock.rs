//! Deterministic fixture-driven implementations of all five routes.
//!
//! Every response is a pure function of the request and the fixture, so two
//! processes fed the same inputs answer byte-for-byte identically. The same
//! handler backs both the in-process transport and the HTTP mock server.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::*;
use super::{Transport, TransportError};
use crate::datamodel::BackendRole;
use crate::hashing::{fnv1a64, fnv1a64_fields};
use crate::imaging::encode_png_rgb;
use crate::segmentation::count_tokens;
use crate::{Error, Result};

/// Default embedding width of the trigram embedder.
pub const MOCK_EMBED_DIM: usize = 256;

const MAX_MOCK_PIXELS: u64 = 4096 * 4096;

/// How a text route turns a prompt into a reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Responder {
    /// Returns the prompt verbatim.
    #[default]
    Echo,
    /// Returns the prompt followed by `suffix`.
    EchoSuffix { suffix: String },
    Fixed { text: String },
    /// First matching rule wins; otherwise `fallback` (echo when absent).
    Scripted {
        rules: Vec<Rule>,
        #[serde(default)]
        fallback: Option<Box<Responder>>,
    },
    /// Picks one of `choices` by hashing the prompt and attached images.
    Hashed { choices: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ends_with: Option<String>,
    pub reply: String,
}

impl Rule {
    fn matches(&self, prompt: &str) -> bool {
        if self.contains.is_none() && self.ends_with.is_none() {
            return false;
        }
        self.contains.as_deref().is_none_or(|c| prompt.contains(c))
            && self.ends_with.as_deref().is_none_or(|s| prompt.ends_with(s))
    }
}

impl Responder {
    fn validate(&self) -> Result<()> {
        match self {
            Responder::Hashed { choices } if choices.is_empty() => {
                Err(Error::Config("hashed responder needs at least one choice".into()))
            }
            Responder::Scripted {
                fallback: Some(f), ..
            } => f.validate(),
            _ => Ok(()),
        }
    }

    pub fn respond(&self, prompt: &str, images_b64: &[String]) -> String {
        match self {
            Responder::Echo => prompt.to_string(),
            Responder::EchoSuffix { suffix } => format!("{prompt}{suffix}"),
            Responder::Fixed { text } => text.clone(),
            Responder::Scripted { rules, fallback } => {
                match rules.iter().find(|r| r.matches(prompt)) {
                    Some(r) => r.reply.clone(),
                    None => fallback
                        .as_deref()
                        .unwrap_or(&Responder::Echo)
                        .respond(prompt, images_b64),
                }
            }
            Responder::Hashed { choices } => {
                let mut fields = vec![prompt];
                fields.extend(images_b64.iter().map(String::as_str));
                let h = fnv1a64_fields(&fields);
                choices[(h % choices.len() as u64) as usize].clone()
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SegmentMode {
    /// Even splits: `round(k * n / parts)` for `k = 1..parts`.
    #[default]
    Quantile,
    /// Always returns the given indices, valid or not.
    Fixed { indices: Vec<i64> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailRule {
    pub route: String,
    pub contains: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockFixture {
    pub t2i_model_id: String,
    pub mllm_model_id: String,
    pub llm_model_id: String,
    pub embed_model_id: String,
    pub segment_model_id: String,
    pub mllm: Responder,
    pub llm: Responder,
    pub embed_dim: usize,
    pub segment: SegmentMode,
    /// Answer the first N calls of a route (by name, e.g. `"t2i"`) with 503.
    pub fail_first: BTreeMap<String, u32>,
    /// Always answer 503 when the request body contains the given text.
    pub fail_when_contains: Vec<FailRule>,
}

impl Default for MockFixture {
    fn default() -> Self {
        Self {
            t2i_model_id: "mock-t2i".into(),
            mllm_model_id: "mock-mllm".into(),
            llm_model_id: "mock-llm".into(),
            embed_model_id: "mock-trigram-embed".into(),
            segment_model_id: "mock-quantile-splitter".into(),
            mllm: Responder::Echo,
            llm: Responder::Echo,
            embed_dim: MOCK_EMBED_DIM,
            segment: SegmentMode::Quantile,
            fail_first: BTreeMap::new(),
            fail_when_contains: Vec::new(),
        }
    }
}

impl MockFixture {
    pub fn model_id(&self, role: BackendRole) -> &str {
        match role {
            BackendRole::T2i => &self.t2i_model_id,
            BackendRole::Mllm => &self.mllm_model_id,
            BackendRole::Llm => &self.llm_model_id,
            BackendRole::Embed => &self.embed_model_id,
            BackendRole::Segment => &self.segment_model_id,
        }
    }

    /// The fixture shipped for the bundled mini-sets.
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../../data/mock_fixture.json"))
            .expect("bundled fixture parses")
    }
}

/// RGB canvas of the mock text-to-image model: the eight big-endian bytes of
/// `fnv1a64(model_id \n prompt \n seed)` tiled over the raw pixel buffer.
pub fn mock_canvas(model_id: &str, prompt: &str, seed: u64, width: u32, height: u32) -> Vec<u8> {
    let h = fnv1a64_fields(&[model_id, prompt, &seed.to_string()]).to_be_bytes();
    let len = width as usize * height as usize * 3;
    let mut rgb = h.repeat(len.div_ceil(8));
    rgb.truncate(len);
    rgb
}

/// Feature-hashed character-trigram counts, L2-normalized.
///
/// The text is lowercased and padded with one space on each side; trigram `t`
/// lands in bucket `fnv1a64(t) % dim`.
pub fn trigram_embedding(text: &str, dim: usize) -> Vec<f64> {
    let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
    let mut v = vec![0.0; dim];
    for w in padded.windows(3) {
        let tri: String = w.iter().collect();
        v[(fnv1a64(tri.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Even split points of an `n`-token text.
pub fn quantile_splits(n: usize, parts: usize) -> Vec<i64> {
    (1..parts)
        .map(|k| ((2 * k * n + parts) / (2 * parts)) as i64)
        .collect()
}

pub struct MockBackends {
    fixture: MockFixture,
    calls: [AtomicU64; 5],
    failed_so_far: Mutex<BTreeMap<String, u32>>,
}

impl std::fmt::Debug for MockBackends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackends")
            .field("calls", &self.stats())
            .finish_non_exhaustive()
    }
}

fn route_index(route: Route) -> usize {
    Route::ALL.iter().position(|r| *r == route).expect("known route")
}

type Reply = (u16, Value);

fn bad_request(msg: impl Into<String>) -> Reply {
    (400, json!({ "error": msg.into() }))
}

fn parse<T: DeserializeOwned>(body: &Value) -> std::result::Result<T, Reply> {
    serde_json::from_value(body.clone()).map_err(|e| bad_request(format!("invalid request body: {e}")))
}

impl MockBackends {
    pub fn new(fixture: MockFixture) -> Result<Self> {
        fixture.mllm.validate()?;
        fixture.llm.validate()?;
        if fixture.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        for name in fixture.fail_first.keys() {
            if Route::from_name(name).is_none() {
                return Err(Error::Config(format!("unknown route `{name}` in fail_first")));
            }
        }
        Ok(Self {
            fixture,
            calls: Default::default(),
            failed_so_far: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn fixture(&self) -> &MockFixture {
        &self.fixture
    }

    pub fn calls(&self, route: Route) -> u64 {
        self.calls[route_index(route)].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> u64 {
        Route::ALL.iter().map(|r| self.calls(*r)).sum()
    }

    pub fn reset_counters(&self) {
        for c in &self.calls {
            c.store(0, Ordering::SeqCst);
        }
    }

    /// Per-route call counts as a JSON object.
    pub fn stats(&self) -> Value {
        let mut m = serde_json::Map::new();
        for r in Route::ALL {
            m.insert(r.name().to_string(), json!(self.calls(r)));
        }
        Value::Object(m)
    }

    pub fn models(&self) -> Vec<String> {
        BackendRole::ALL
            .iter()
            .map(|r| self.fixture.model_id(*r).to_string())
            .collect()
    }

    fn injected_failure(&self, route: Route, body: &Value) -> Option<Reply> {
        let name = route.name();
        if let Some(&budget) = self.fixture.fail_first.get(name) {
            let mut seen = self.failed_so_far.lock().expect("mock lock");
            let n = seen.entry(name.to_string()).or_insert(0);
            if *n < budget {
                *n += 1;
                return Some((503, json!({ "error": "injected failure" })));
            }
        }
        if !self.fixture.fail_when_contains.is_empty() {
            let text = body.to_string();
            for rule in &self.fixture.fail_when_contains {
                if rule.route == name && text.contains(&rule.contains) {
                    return Some((503, json!({ "error": "injected failure" })));
                }
            }
        }
        None
    }

    /// Serves one request; returns the HTTP status and JSON body.
    pub fn handle(&self, route: Route, body: &Value) -> (u16, Value) {
        self.calls[route_index(route)].fetch_add(1, Ordering::SeqCst);
        if let Some(fail) = self.injected_failure(route, body) {
            return fail;
        }
        let result = match route {
            Route::T2i => self.t2i(body),
            Route::MmGenerate => self.mm_generate(body),
            Route::Generate => self.generate(body),
            Route::Embed => self.embed(body),
            Route::Segment => self.segment(body),
        };
        match result {
            Ok(v) => (200, v),
            Err(reply) => reply,
        }
    }

    fn t2i(&self, body: &Value) -> std::result::Result<Value, Reply> {
        let req: T2iRequest = parse(body)?;
        if req.prompt.trim().is_empty() {
            return Err(bad_request("prompt must not be empty"));
        }
        if req.width == 0 || req.height == 0 {
            return Err(bad_request("width and height must be positive"));
        }
        if u64::from(req.width) * u64::from(req.height) > MAX_MOCK_PIXELS {
            return Err(bad_request("image too large for the mock"));
        }
        let model = &self.fixture.t2i_model_id;
        let rgb = mock_canvas(model, &req.prompt, req.seed, req.width, req.height);
        let png = encode_png_rgb(req.width, req.height, &rgb);
        Ok(json!(T2iResponse {
            image_png_b64: B64.encode(png),
            model_id: model.clone(),
        }))
    }

    fn mm_generate(&self, body: &Value) -> std::result::Result<Value, Reply> {
        let req: MmGenerateRequest = parse(body)?;
        let text = self.fixture.mllm.respond(&req.prompt, &req.images_png_b64);
        Ok(json!(TextResponse {
            text,
            model_id: self.fixture.mllm_model_id.clone(),
        }))
    }

    fn generate(&self, body: &Value) -> std::result::Result<Value, Reply> {
        let req: GenerateRequest = parse(body)?;
        let text = self.fixture.llm.respond(&req.prompt, &[]);
        Ok(json!(TextResponse {
            text,
            model_id: self.fixture.llm_model_id.clone(),
        }))
    }

    fn embed(&self, body: &Value) -> std::result::Result<Value, Reply> {
        let req: EmbedRequest = parse(body)?;
        if req.texts.is_empty() {
            return Err(bad_request("texts must not be empty"));
        }
        if req.texts.iter().any(|t| t.is_empty()) {
            return Err(bad_request("texts must not contain empty strings"));
        }
        let dim = self.fixture.embed_dim;
        let vectors: Vec<Vec<f64>> = req.texts.iter().map(|t| trigram_embedding(t, dim)).collect();
        Ok(json!(EmbedResponse { vectors, dim }))
    }

    fn segment(&self, body: &Value) -> std::result::Result<Value, Reply> {
        let req: SegmentRequest = parse(body)?;
        if req.parts < 2 {
            return Err(bad_request("parts must be >= 2"));
        }
        let token_indices = match &self.fixture.segment {
            SegmentMode::Quantile => quantile_splits(count_tokens(&req.text).len(), req.parts),
            SegmentMode::Fixed { indices } => indices.clone(),
        };
        Ok(json!(SegmentResponse { token_indices }))
    }
}

impl Transport for MockBackends {
    fn post(&self, route: Route, body: &Value) -> std::result::Result<Value, TransportError> {
        let (status, v) = self.handle(route, body);
        if status == 200 {
            Ok(v)
        } else {
            let message = v
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("unknown error")
                .to_string();
            Err(TransportError::Status {
                code: status,
                message,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_a_385_token_story() {
        assert_eq!(quantile_splits(385, 5), vec![77, 154, 231, 308]);
        // 2.5 rounds up
        assert_eq!(quantile_splits(10, 4), vec![3, 5, 8]);
    }

    #[test]
    fn responders() {
        let p = "BEGINNING Answer: ";
        assert_eq!(Responder::Echo.respond(p, &[]), p);
        assert_eq!(
            Responder::EchoSuffix { suffix: "Happiness".into() }.respond(p, &[]),
            "BEGINNING Answer: Happiness"
        );
        let scripted = Responder::Scripted {
            rules: vec![
                Rule { contains: Some("sorry".into()), ends_with: None, reply: "Sadness".into() },
                Rule { contains: None, ends_with: Some("?".into()), reply: "Unknown".into() },
            ],
            fallback: Some(Box::new(Responder::Fixed { text: "Neutral".into() })),
        };
        assert_eq!(scripted.respond("I'm so sorry.", &[]), "Sadness");
        assert_eq!(scripted.respond("what?", &[]), "Unknown");
        assert_eq!(scripted.respond("hello", &[]), "Neutral");
        let hashed = Responder::Hashed { choices: vec!["a".into(), "b".into(), "c".into()] };
        assert_eq!(hashed.respond("x", &["img".into()]), hashed.respond("x", &["img".into()]));
    }

    #[test]
    fn injected_failures_then_recovery() {
        let mut f = MockFixture::default();
        f.fail_first.insert("generate".into(), 2);
        let m = MockBackends::new(f).unwrap();
        let body = json!({"prompt": "p", "max_new_tokens": 4, "temperature": 0.0});
        assert_eq!(m.handle(Route::Generate, &body).0, 503);
        assert_eq!(m.handle(Route::Generate, &body).0, 503);
        assert_eq!(m.handle(Route::Generate, &body).0, 200);
        assert_eq!(m.calls(Route::Generate), 3);
    }

    #[test]
    fn malformed_bodies_get_400() {
        let m = MockBackends::new(MockFixture::default()).unwrap();
        assert_eq!(m.handle(Route::Embed, &json!({"texts": [""]})).0, 400);
        assert_eq!(m.handle(Route::T2i, &json!({"prompt": 3})).0, 400);
        assert_eq!(
            m.handle(Route::Segment, &json!({"text": "a", "parts": 1, "token_cap": 77})).0,
            400
        );
    }

    #[test]
    fn bundled_fixture_is_valid() {
        MockBackends::new(MockFixture::bundled()).unwrap();
    }
}
