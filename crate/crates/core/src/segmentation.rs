//! Token counting, full-stop snapping and story partitioning.
//!
//! Stories are cut into `parts` segments so that each one fits the text
//! encoder of the image model (77 tokens by default). Split points come from
//! the segment-proposer backend, or from even token splits when its reply is
//! unusable, and are then moved to the nearest full stop.
//!
//! Public offsets are character offsets; byte offsets are used internally for
//! slicing only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::mock::quantile_splits;
use crate::backends::{validate_split_indices, SplitProposal, SplitProposer};
use crate::datamodel::Story;
use crate::hashing::sha256_hex;
use crate::imaging::write_atomic;
use crate::{Error, Result};

/// Token cap of the image model's text encoder.
pub const DEFAULT_TOKEN_CAP: usize = 77;

/// Number of segments a story is cut into.
pub const DEFAULT_PARTS: usize = 5;

/// Splits text into tokens given as byte spans.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<(usize, usize)>;
}

/// Splits on whitespace and emits every other non-alphanumeric character as a
/// token of its own.
#[derive(Clone, Copy, Debug, Default)]
pub struct DefaultTokenizer;

impl Tokenizer for DefaultTokenizer {
    fn tokenize(&self, text: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut word: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                word.get_or_insert(i);
                continue;
            }
            if let Some(s) = word.take() {
                out.push((s, i));
            }
            if !c.is_whitespace() {
                out.push((i, i + c.len_utf8()));
            }
        }
        if let Some(s) = word {
            out.push((s, text.len()));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    text: String,
    tokens: Vec<Token>,
    cap: usize,
}

/// Tokenizes with [`DefaultTokenizer`] and the default cap.
pub fn count_tokens(text: &str) -> TokenizedText {
    TokenizedText::new(text, &DefaultTokenizer, DEFAULT_TOKEN_CAP)
}

impl TokenizedText {
    /// Tokenizes `text`; spans from `tokenizer` must be ordered,
    /// non-overlapping and on character boundaries.
    pub fn new(text: &str, tokenizer: &dyn Tokenizer, cap: usize) -> Self {
        let spans = tokenizer.tokenize(text);
        let mut tokens = Vec::with_capacity(spans.len());
        let char_starts: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        let char_at = |byte: usize| char_starts.partition_point(|&b| b < byte);
        for (s, e) in spans {
            assert!(s < e && e <= text.len(), "token span out of bounds");
            let char_start = char_at(s);
            let char_end = char_at(e);
            tokens.push(Token {
                start: s,
                end: e,
                char_start,
                char_end,
            });
        }
        Self {
            text: text.to_string(),
            tokens,
            cap,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn surface(&self, i: usize) -> &str {
        let t = self.tokens[i];
        &self.text[t.start..t.end]
    }

    /// Number of tokens that start before byte `offset`.
    fn tokens_before(&self, offset: usize) -> usize {
        self.tokens.partition_point(|t| t.start < offset)
    }

    fn char_offset(&self, byte: usize) -> usize {
        self.text[..byte].chars().count()
    }

    /// Every '.' as (byte offset just after it, token boundary index).
    fn full_stops(&self) -> Vec<(usize, usize)> {
        self.text
            .match_indices('.')
            .map(|(b, _)| (b + 1, self.tokens_before(b + 1)))
            .collect()
    }
}

/// Character offset just after the '.' nearest (in tokens) to `token_index`,
/// ties going to the earlier one; the start of token `token_index` when the
/// text has no '.'.
pub fn snap_to_full_stop(tokenized: &TokenizedText, token_index: usize) -> Result<usize> {
    if token_index == 0 || token_index >= tokenized.len() {
        return Err(Error::Precondition(format!(
            "token index {token_index} outside (0, {})",
            tokenized.len()
        )));
    }
    let best = tokenized
        .full_stops()
        .into_iter()
        .min_by_key(|&(off, tb)| (tb.abs_diff(token_index), off));
    Ok(match best {
        Some((off, _)) => tokenized.char_offset(off),
        None => tokenized.tokens[token_index].char_start,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMethod {
    Proposed,
    FallbackQuartile,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub story_id: String,
    pub segments: Vec<Segment>,
    pub method: SplitMethod,
    /// Some segment exceeds the token cap and no sentence-aligned split
    /// avoids it.
    pub over_cap: bool,
}

/// Persisted form of a [`Segmentation`]: interior character boundaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub id: String,
    pub method: SplitMethod,
    pub boundaries: Vec<usize>,
    #[serde(default)]
    pub over_cap: bool,
}

impl Segmentation {
    pub fn concat(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn record(&self) -> SegmentationRecord {
        SegmentationRecord {
            id: self.story_id.clone(),
            method: self.method,
            boundaries: self.segments.iter().skip(1).map(|s| s.char_start).collect(),
            over_cap: self.over_cap,
        }
    }

    /// Rebuilds the segments of `text` from a record.
    pub fn from_record(text: &str, rec: &SegmentationRecord) -> Result<Self> {
        let n_chars = text.chars().count();
        let mut cuts = vec![0];
        cuts.extend(rec.boundaries.iter().copied());
        cuts.push(n_chars);
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DataIntegrity(format!(
                "segmentation of `{}` has invalid boundaries",
                rec.id
            )));
        }
        let byte_of: Vec<usize> = text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect();
        let segments = cuts
            .windows(2)
            .map(|w| Segment {
                char_start: w[0],
                char_end: w[1],
                text: text[byte_of[w[0]]..byte_of[w[1]]].to_string(),
            })
            .collect();
        Ok(Self {
            story_id: rec.id.clone(),
            segments,
            method: rec.method,
            over_cap: rec.over_cap,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    offset: usize,
    tb: usize,
}

/// Interior cut points: full stops first; token starts are added when the
/// story has too few sentences.
fn candidates(tok: &TokenizedText, parts: usize) -> Vec<Candidate> {
    let n = tok.len();
    let interior = |&(offset, tb): &(usize, usize)| offset > 0 && offset < tok.text.len() && tb >= 1 && tb < n;
    let mut out: Vec<Candidate> = Vec::new();
    for (offset, tb) in tok.full_stops().into_iter().filter(interior) {
        if out.last().is_none_or(|c| c.tb != tb) {
            out.push(Candidate { offset, tb });
        }
    }
    if out.len() + 1 < parts {
        let mut by_tb: Vec<Candidate> = (1..n)
            .map(|i| Candidate {
                offset: tok.tokens[i].start,
                tb: i,
            })
            .collect();
        for c in &out {
            by_tb[c.tb - 1] = *c;
        }
        out = by_tb;
    }
    out
}

fn nearest(cands: &[Candidate], p: usize) -> usize {
    let mut best = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.tb.abs_diff(p) < cands[best].tb.abs_diff(p) {
            best = i;
        }
    }
    best
}

fn segment_lengths(cands: &[Candidate], chosen: &[usize], n: usize) -> Vec<usize> {
    let mut prev = 0;
    let mut out = Vec::with_capacity(chosen.len() + 1);
    for &j in chosen {
        out.push(cands[j].tb - prev);
        prev = cands[j].tb;
    }
    out.push(n - prev);
    out
}

/// Cheapest choice of `k` increasing candidates (cost: token distance to the
/// proposals) such that every segment stays within `cap`.
fn fit_under_cap(cands: &[Candidate], proposals: &[usize], n: usize, cap: usize) -> Option<Vec<usize>> {
    let k = proposals.len();
    let m = cands.len();
    const INF: usize = usize::MAX;
    // cost[i][j]: best cost with proposal i placed at candidate j.
    let mut cost = vec![vec![INF; m]; k];
    let mut back = vec![vec![usize::MAX; m]; k];
    for j in 0..m {
        if cands[j].tb <= cap {
            cost[0][j] = cands[j].tb.abs_diff(proposals[0]);
        }
    }
    for i in 1..k {
        for j in 0..m {
            let here = cands[j].tb.abs_diff(proposals[i]);
            for pj in 0..j {
                if cost[i - 1][pj] == INF || cands[j].tb - cands[pj].tb > cap {
                    continue;
                }
                let c = cost[i - 1][pj] + here;
                if c < cost[i][j] {
                    cost[i][j] = c;
                    back[i][j] = pj;
                }
            }
        }
    }
    let last = (0..m)
        .filter(|&j| cost[k - 1][j] != INF && n - cands[j].tb <= cap)
        .min_by_key(|&j| (cost[k - 1][j], j))?;
    let mut chosen = vec![last; k];
    for i in (1..k).rev() {
        chosen[i - 1] = back[i][chosen[i]];
    }
    Some(chosen)
}

/// Partitions tokenized text given split proposals (token indices), or even
/// splits when `proposals` is `None`.
pub fn partition(
    story_id: &str,
    tok: &TokenizedText,
    parts: usize,
    proposals: Option<Vec<usize>>,
) -> Result<Segmentation> {
    if parts < 2 {
        return Err(Error::Precondition("segmentation needs parts >= 2".into()));
    }
    let n = tok.len();
    let cands = candidates(tok, parts);
    if cands.len() + 1 < parts {
        return Err(Error::DegenerateStory {
            story_id: story_id.to_string(),
            parts,
        });
    }
    let (method, props) = match proposals {
        Some(p) => (SplitMethod::Proposed, p),
        None => (
            SplitMethod::FallbackQuartile,
            quantile_splits(n, parts).into_iter().map(|i| i as usize).collect(),
        ),
    };
    let m = cands.len();
    let k = parts - 1;
    if props.len() != k {
        return Err(Error::Precondition(format!("expected {k} split proposals, got {}", props.len())));
    }
    let mut chosen = Vec::with_capacity(k);
    for (i, &p) in props.iter().enumerate() {
        let lo = chosen.last().map_or(0, |&prev: &usize| prev + 1);
        let hi = m - (k - i);
        chosen.push(nearest(&cands, p).clamp(lo, hi));
    }
    let mut over_cap = false;
    if segment_lengths(&cands, &chosen, n).iter().any(|&l| l > tok.cap) {
        match fit_under_cap(&cands, &props, n, tok.cap) {
            Some(c) => chosen = c,
            None => over_cap = true,
        }
    }
    let mut cuts = vec![0];
    cuts.extend(chosen.iter().map(|&j| cands[j].offset));
    cuts.push(tok.text.len());
    let segments = cuts
        .windows(2)
        .map(|w| Segment {
            char_start: tok.char_offset(w[0]),
            char_end: tok.char_offset(w[1]),
            text: tok.text[w[0]..w[1]].to_string(),
        })
        .collect();
    Ok(Segmentation {
        story_id: story_id.to_string(),
        segments,
        method,
        over_cap,
    })
}

/// Asks `proposer` for split points and partitions the story, falling back
/// to even splits when the proposer fails or replies with unusable indices.
pub fn segment_tokenized(
    story_id: &str,
    tok: &TokenizedText,
    parts: usize,
    proposer: &dyn SplitProposer,
) -> Result<Segmentation> {
    if parts < 2 {
        return Err(Error::Precondition("segmentation needs parts >= 2".into()));
    }
    let proposals = match proposer.propose_splits(tok.text(), parts, tok.cap()) {
        Ok(SplitProposal::Indices(ix)) => {
            let raw: Vec<i64> = ix.iter().map(|&i| i as i64).collect();
            validate_split_indices(&raw, parts, tok.len()).ok()
        }
        Ok(SplitProposal::FallbackNeeded(_)) => None,
        Err(e) if e.is_item_failure() => None,
        Err(e) => return Err(e),
    };
    partition(story_id, tok, parts, proposals)
}

/// [`segment_tokenized`] with the default tokenizer and cap.
pub fn segment_story(story: &Story, parts: usize, proposer: &dyn SplitProposer) -> Result<Segmentation> {
    segment_tokenized(&story.id, &count_tokens(&story.text), parts, proposer)
}

/// Segmentations stored next to the image cache so later runs reuse them.
#[derive(Clone, Debug)]
pub struct SegmentationStore {
    dir: PathBuf,
}

impl SegmentationStore {
    pub fn new(cache_dir: &Path) -> Self {
        Self {
            dir: cache_dir.join("segments"),
        }
    }

    pub fn key(proposer_model: &str, story: &Story, parts: usize, cap: usize) -> String {
        sha256_hex(format!("{proposer_model}\n{}\n{}\n{parts}\n{cap}", story.id, story.text).as_bytes())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str, story: &Story) -> Option<Segmentation> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        let rec: SegmentationRecord = serde_json::from_slice(&bytes).ok()?;
        Segmentation::from_record(&story.text, &rec).ok()
    }

    pub fn put(&self, key: &str, seg: &Segmentation) -> Result<()> {
        write_atomic(&self.path(key), &serde_json::to_vec(&seg.record())?)
    }
}
