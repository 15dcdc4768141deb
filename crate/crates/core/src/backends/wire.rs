//! Request and response bodies of the five backend routes.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    T2i,
    MmGenerate,
    Generate,
    Embed,
    Segment,
}

impl Route {
    pub const ALL: [Route; 5] = [
        Route::T2i,
        Route::MmGenerate,
        Route::Generate,
        Route::Embed,
        Route::Segment,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Route::T2i => "/v1/t2i",
            Route::MmGenerate => "/v1/mm-generate",
            Route::Generate => "/v1/generate",
            Route::Embed => "/v1/embed",
            Route::Segment => "/v1/segment",
        }
    }

    pub fn name(self) -> &'static str {
        &self.path()[4..]
    }

    pub fn from_name(name: &str) -> Option<Route> {
        Route::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2iRequest {
    pub prompt: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2iResponse {
    pub image_png_b64: String,
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmGenerateRequest {
    pub prompt: String,
    pub images_png_b64: Vec<String>,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub text: String,
    pub parts: usize,
    pub token_cap: usize,
}

/// Indices are signed on the wire so that out-of-range replies can be
/// received and rejected rather than failing to parse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub token_indices: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
