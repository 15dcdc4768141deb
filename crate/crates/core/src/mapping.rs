//! Answer extraction and nearest-label mapping.
//!
//! `output_process` cuts a model's echoed prompt and keeps the text after the
//! last `Answer:` marker; `map_to_label` maps free text onto a label set by
//! exact match first and by embedding cosine similarity otherwise.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backends::{Embedder, EmbeddingVector};
use crate::datamodel::{canonicalize_label, LabelSet};
use crate::{Error, Result};

/// Default share of the prompt an echoed prefix must cover to be stripped.
pub const DEFAULT_ECHO_THRESHOLD: f64 = 0.9;

const ANSWER_MARKER: &str = "Answer:";

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Domain(format!(
            "cosine of vectors with dims {} and {}",
            u.dim(),
            v.dim()
        )));
    }
    let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
    let nu = u.values().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.values().iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    Ok(dot / (nu * nv))
}

/// Removes an echoed prompt and isolates the answer field.
///
/// Steps, repeated until nothing changes: strip the longest common prefix of
/// `raw` and `prompt` if it covers at least `threshold` of the prompt's
/// characters; keep only the text after the last `Answer:`; trim.
pub fn output_process_with(raw: &str, prompt: &str, threshold: f64) -> String {
    let prompt_chars = prompt.chars().count();
    let mut cur = raw.trim().to_string();
    loop {
        let mut next = cur.as_str();
        if prompt_chars > 0 {
            let (lcp_chars, lcp_bytes) = next
                .char_indices()
                .zip(prompt.chars())
                .take_while(|((_, a), b)| a == b)
                .fold((0, 0), |(n, _), ((i, a), _)| (n + 1, i + a.len_utf8()));
            if lcp_chars > 0 && lcp_chars as f64 >= threshold * prompt_chars as f64 {
                next = &next[lcp_bytes..];
            }
        }
        if let Some(pos) = next.rfind(ANSWER_MARKER) {
            next = &next[pos + ANSWER_MARKER.len()..];
        }
        let next = next.trim();
        if next == cur {
            return cur;
        }
        cur = next.to_string();
    }
}

/// [`output_process_with`] at the default threshold.
pub fn output_process(raw: &str, prompt: &str) -> String {
    output_process_with(raw, prompt, DEFAULT_ECHO_THRESHOLD)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappedVia {
    ExactMatch,
    Embedding,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingResult {
    pub label: String,
    /// Cosine per label in label-set order; empty unless `via` is embedding.
    pub scores: IndexMap<String, f64>,
    pub via: MappedVia,
}

/// First index of the maximum; NaN never wins.
fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Maps `answer` to the nearest label.
pub fn map_to_label(answer: &str, labels: &LabelSet, embedder: &dyn Embedder) -> Result<MappingResult> {
    if answer.trim().is_empty() {
        return Ok(MappingResult {
            label: labels.fallback_label().to_string(),
            scores: IndexMap::new(),
            via: MappedVia::Fallback,
        });
    }
    if let Some(l) = canonicalize_label(answer, labels) {
        return Ok(MappingResult {
            label: l.to_string(),
            scores: IndexMap::new(),
            via: MappedVia::ExactMatch,
        });
    }
    let mut texts = Vec::with_capacity(labels.len() + 1);
    texts.push(answer.to_string());
    texts.extend(labels.labels().iter().cloned());
    let vectors = embedder.embed_texts(&texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Domain(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    let cosines = vectors[1..]
        .iter()
        .map(|v| cosine(&vectors[0], v))
        .collect::<Result<Vec<f64>>>()?;
    let best = first_argmax(&cosines);
    Ok(MappingResult {
        label: labels.labels()[best].clone(),
        scores: labels.labels().iter().cloned().zip(cosines).collect(),
        via: MappedVia::Embedding,
    })
}
