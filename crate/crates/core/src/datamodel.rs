//! Validated value types shared by every pipeline stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::{Error, Result};

/// The IEMOCAP label list in prompt order.
pub const IEMOCAP_LABELS: [&str; 10] = [
    "Neutral",
    "Happiness",
    "Sadness",
    "Anger",
    "Frustration",
    "Fear",
    "Excitement",
    "Disgust",
    "Surprise",
    "Unknown",
];

/// The IEMOCAP label clause exactly as it appears in the published prompts,
/// irregular spacing included.
pub const IEMOCAP_CLAUSE: &str =
    "Neutral, Happiness, Sadness, Anger, Frustration, Fear, Excitement, Disgust Surprise ,Unknown";

/// MELD's seven emotion classes, taken from the dataset documentation.
pub const MELD_LABELS: [&str; 7] = [
    "Neutral", "Joy", "Surprise", "Anger", "Sadness", "Disgust", "Fear",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Er,
    Qa,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Er => "er",
            Task::Qa => "qa",
        })
    }
}

/// An ordered, non-empty set of class labels.
///
/// Order matters: it is the prompt order and the tie-break order for label
/// mapping. An optional `clause` overrides the rendered label list in prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSetRepr", into = "LabelSetRepr")]
pub struct LabelSet {
    labels: Vec<String>,
    case_insensitive: bool,
    clause: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelSetRepr {
    labels: Vec<String>,
    #[serde(default = "default_true")]
    case_insensitive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clause: Option<String>,
}

fn default_true() -> bool {
    true
}

impl TryFrom<LabelSetRepr> for LabelSet {
    type Error = Error;

    fn try_from(r: LabelSetRepr) -> Result<Self> {
        let mut set = LabelSet::with_policy(r.labels, r.case_insensitive)?;
        set.clause = r.clause;
        Ok(set)
    }
}

impl From<LabelSet> for LabelSetRepr {
    fn from(s: LabelSet) -> Self {
        LabelSetRepr {
            labels: s.labels,
            case_insensitive: s.case_insensitive,
            clause: s.clause,
        }
    }
}

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_policy(labels.into_iter().map(Into::into).collect(), true)
    }

    pub fn with_policy(labels: Vec<String>, case_insensitive: bool) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Domain("label set must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            let key = fold(l);
            if key.is_empty() {
                return Err(Error::Domain("label set contains an empty label".into()));
            }
            if !seen.insert(key) {
                return Err(Error::Domain(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self {
            labels,
            case_insensitive,
            clause: None,
        })
    }

    /// Replaces the rendered label list used in prompts.
    pub fn with_clause(mut self, clause: impl Into<String>) -> Self {
        self.clause = Some(clause.into());
        self
    }

    pub fn iemocap() -> Self {
        Self::new(IEMOCAP_LABELS)
            .expect("static label set")
            .with_clause(IEMOCAP_CLAUSE)
    }

    pub fn meld() -> Self {
        Self::new(MELD_LABELS).expect("static label set")
    }

    /// Looks up a shipped label set by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "iemocap" => Some(Self::iemocap()),
            "meld" => Some(Self::meld()),
            _ => None,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clause(&self) -> Option<&str> {
        self.clause.as_deref()
    }

    pub fn case_insensitive(&self) -> bool {
        self.case_insensitive
    }

    /// Position of `label` under the set's match policy.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        if self.case_insensitive {
            let key = fold(label);
            self.labels.iter().position(|l| fold(l) == key)
        } else {
            self.labels.iter().position(|l| l == label)
        }
    }

    /// Label used when a model produced no usable answer: `Unknown` when the
    /// set has it, otherwise the first label.
    pub fn fallback_label(&self) -> &str {
        self.index_of("Unknown")
            .map(|i| self.labels[i].as_str())
            .unwrap_or(&self.labels[0])
    }
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Exact-match fast path: returns the label equal to `raw` under the set's
/// policy (case-folded and trimmed by default), or `None`.
pub fn canonicalize_label<'a>(raw: &str, labels: &'a LabelSet) -> Option<&'a str> {
    labels.index_of(raw).map(|i| labels.labels[i].as_str())
}

/// A labeled utterance for emotion recognition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub gold_label: Option<String>,
    pub dataset: String,
}

/// One question of a conversation with its reference answers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaTurn {
    pub index: usize,
    pub question: String,
    pub references: Vec<String>,
}

/// A narrative with an ordered conversation about it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Story {
    pub id: String,
    pub text: String,
    pub turns: Vec<QaTurn>,
}

impl Story {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::DataIntegrity(format!("story `{}` has no turns", self.id)));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.index != i {
                return Err(Error::DataIntegrity(format!(
                    "story `{}`: turn indices are not contiguous from 0 (found {} at position {i})",
                    self.id, t.index
                )));
            }
            if t.references.is_empty() {
                return Err(Error::DataIntegrity(format!(
                    "story `{}` turn {i} has no reference answer",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Id of the prediction record for turn `index`.
    pub fn turn_record_id(&self, index: usize) -> String {
        turn_record_id(&self.id, index)
    }
}

pub fn turn_record_id(story_id: &str, index: usize) -> String {
    format!("{story_id}#{index}")
}

/// Splits a QA record id into `(story_id, turn_index)`.
pub fn parse_turn_record_id(id: &str) -> Option<(&str, usize)> {
    let (story, turn) = id.rsplit_once('#')?;
    Some((story, turn.parse().ok()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Multimodal,
    Unimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Generated,
    Demo,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextInput {
    Input,
    None,
}

/// Which inputs the instruction tells the model to attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directive {
    Both,
    Text,
    Image,
    P1,
    P2,
    P3,
    Qa,
}

impl Directive {
    pub fn as_str(self) -> &'static str {
        match self {
            Directive::Both => "both",
            Directive::Text => "text",
            Directive::Image => "image",
            Directive::P1 => "p1",
            Directive::P2 => "p2",
            Directive::P3 => "p3",
            Directive::Qa => "qa",
        }
    }

    pub fn is_special(self) -> bool {
        matches!(self, Directive::P1 | Directive::P2 | Directive::P3)
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Seed derived from the run seed and the item id.
    #[default]
    PerItemDeterministic,
    Fixed(u64),
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendRole {
    T2i,
    Mllm,
    Llm,
    Embed,
    Segment,
}

impl BackendRole {
    pub const ALL: [BackendRole; 5] = [
        BackendRole::T2i,
        BackendRole::Mllm,
        BackendRole::Llm,
        BackendRole::Embed,
        BackendRole::Segment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::T2i => "t2i",
            BackendRole::Mllm => "mllm",
            BackendRole::Llm => "llm",
            BackendRole::Embed => "embed",
            BackendRole::Segment => "segment",
        }
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl DecodeParams {
    pub fn for_task(task: Task) -> Self {
        Self {
            max_new_tokens: match task {
                Task::Er => 64,
                Task::Qa => 32,
            },
            temperature: 0.0,
        }
    }
}

/// One experiment configuration (a row of the experiment matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub modality: Modality,
    pub image_source: ImageSource,
    pub text_input: TextInput,
    pub directive: Directive,
    pub output_processing: bool,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default = "default_backend_ids")]
    pub backend_ids: BTreeMap<BackendRole, String>,
    pub decode: DecodeParams,
}

fn default_backend_ids() -> BTreeMap<BackendRole, String> {
    BackendRole::ALL
        .iter()
        .map(|r| (*r, r.as_str().to_string()))
        .collect()
}

/// A broken spec invariant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl ExperimentSpec {
    /// The eight multimodal configurations of the experiment matrix.
    pub const TABLE_NAMES: [&'static str; 8] = [
        "Gen_Image_Inp_Text_Both",
        "Gen_Image_Inp_Text_Txt",
        "Gen_Image_Inp_Text_Img",
        "Gen_Image_No_Text_Img",
        "Gen_Image_Inp_Text_P1",
        "Gen_Image_Inp_Text_P2",
        "Gen_Image_Inp_Text_P3",
        "Dem_Image_Inp_Text_Both",
    ];

    /// Unimodal text-LM baselines, without and with output-processing.
    pub const BASELINE_NAMES: [&'static str; 2] = ["LLM_Baseline", "LLM_Baseline_OP"];

    /// Multimodal configurations that apply to QA (no special instructions).
    pub const QA_TABLE_NAMES: [&'static str; 5] = [
        "Gen_Image_Inp_Text_Both",
        "Gen_Image_Inp_Text_Txt",
        "Gen_Image_Inp_Text_Img",
        "Gen_Image_No_Text_Img",
        "Dem_Image_Inp_Text_Both",
    ];

    /// Builds a named configuration with task-appropriate decode defaults.
    pub fn builtin(name: &str, task: Task) -> Option<Self> {
        use Directive as D;
        use ImageSource as I;
        use Modality as M;
        use TextInput as T;
        let (modality, image, text, directive, op) = match name {
            "Gen_Image_Inp_Text_Both" => (M::Multimodal, I::Generated, T::Input, D::Both, false),
            "Gen_Image_Inp_Text_Txt" => (M::Multimodal, I::Generated, T::Input, D::Text, false),
            "Gen_Image_Inp_Text_Img" => (M::Multimodal, I::Generated, T::Input, D::Image, false),
            "Gen_Image_No_Text_Img" => (M::Multimodal, I::Generated, T::None, D::Image, false),
            "Gen_Image_Inp_Text_P1" => (M::Multimodal, I::Generated, T::Input, D::P1, false),
            "Gen_Image_Inp_Text_P2" => (M::Multimodal, I::Generated, T::Input, D::P2, false),
            "Gen_Image_Inp_Text_P3" => (M::Multimodal, I::Generated, T::Input, D::P3, false),
            "Dem_Image_Inp_Text_Both" => (M::Multimodal, I::Demo, T::Input, D::Both, false),
            "LLM_Baseline" | "LLM_Baseline_OP" => {
                let directive = match task {
                    Task::Er => D::Text,
                    Task::Qa => D::Qa,
                };
                (M::Unimodal, I::None, T::Input, directive, name.ends_with("_OP"))
            }
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            modality,
            image_source: image,
            text_input: text,
            directive,
            output_processing: op,
            seed_policy: SeedPolicy::default(),
            backend_ids: default_backend_ids(),
            decode: DecodeParams::for_task(task),
        })
    }

    /// Every named configuration applicable to `task`, in matrix order.
    pub fn matrix(task: Task) -> Vec<Self> {
        let names: &[&str] = match task {
            Task::Er => &Self::TABLE_NAMES,
            Task::Qa => &Self::QA_TABLE_NAMES,
        };
        names
            .iter()
            .chain(Self::BASELINE_NAMES.iter())
            .map(|n| Self::builtin(n, task).expect("builtin name"))
            .collect()
    }

    /// Returns every violated invariant; an empty list means valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |s: &str| v.push(Violation(s.to_string()));
        if self.name.trim().is_empty() {
            push("name must not be empty");
        }
        match (self.modality, self.image_source) {
            (Modality::Multimodal, ImageSource::None) => {
                push("multimodal requires a generated or demo image")
            }
            (Modality::Unimodal, ImageSource::Generated | ImageSource::Demo) => {
                push("unimodal forbids images")
            }
            _ => {}
        }
        if self.image_source == ImageSource::None && self.directive == Directive::Image {
            push("image directive requires an image source");
        }
        if self.text_input == TextInput::None && self.directive != Directive::Image {
            push("without text input the directive must be image");
        }
        if self.decode.max_new_tokens == 0 {
            push("decode.max_new_tokens must be positive");
        }
        if !(self.decode.temperature >= 0.0 && self.decode.temperature.is_finite()) {
            push("decode.temperature must be a finite non-negative number");
        }
        v
    }

    /// Checks that the spec can drive `task` prompts.
    pub fn check_task(&self, task: Task) -> Result<()> {
        let ok = match task {
            Task::Er => self.directive != Directive::Qa,
            Task::Qa => !self.directive.is_special(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnsupportedDirective {
                directive: self.directive.to_string(),
                task: task.to_string(),
            })
        }
    }

    pub fn backend_id(&self, role: BackendRole) -> &str {
        self.backend_ids
            .get(&role)
            .map(String::as_str)
            .unwrap_or(role.as_str())
    }

    /// SHA-256 of the canonical JSON encoding; guards resumption.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

/// Returns the spec unchanged when valid, otherwise every violation.
pub fn validate_spec(spec: ExperimentSpec) -> std::result::Result<ExperimentSpec, Vec<Violation>> {
    let v = spec.violations();
    if v.is_empty() {
        Ok(spec)
    } else {
        Err(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFlag {
    EmptyExtractionFallback,
    Retried,
    CacheHit,
    Failed,
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub raw_output: String,
    pub extracted: String,
    pub prediction: String,
    #[serde(default)]
    pub scores: IndexMap<String, f64>,
    #[serde(default)]
    pub image_keys: Vec<String>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub flags: BTreeSet<RecordFlag>,
}

impl PredictionRecord {
    pub fn has(&self, flag: RecordFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// Checks the ER record invariant: the prediction is a label and, when
    /// similarity scores are present, carries the first maximal score.
    pub fn check_er(&self, labels: &LabelSet) -> Result<()> {
        if self.has(RecordFlag::Failed) {
            return Ok(());
        }
        if canonicalize_label(&self.prediction, labels).is_none() {
            return Err(Error::DataIntegrity(format!(
                "record `{}`: prediction `{}` is not a label",
                self.sample_id, self.prediction
            )));
        }
        if self.scores.is_empty() {
            return Ok(());
        }
        let best = labels
            .labels()
            .iter()
            .filter_map(|l| self.scores.get(l).map(|s| (l, *s)))
            .fold(None::<(&String, f64)>, |acc, (l, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((l, s)),
            });
        match best {
            Some((l, _)) if *l == self.prediction => Ok(()),
            _ => Err(Error::DataIntegrity(format!(
                "record `{}`: prediction is not the arg-max of its scores",
                self.sample_id
            ))),
        }
    }
}
