//! Normalized dataset files, the bundled mini-sets and converters from the
//! raw MELD, IEMOCAP and CoQA layouts.
//!
//! Normalized files hold one JSON object per line:
//! emotion recognition `{"id","text","label"}`, question answering
//! `{"id","story","turns":[{"q","answers":[..]}]}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{canonicalize_label, LabelSet, QaTurn, Sample, Story, Task};
use crate::hashing::sha256_hex;
use crate::{Error, Result};

const MINI_ER: &str = include_str!("../data/mini_er.jsonl");
const MINI_QA: &str = include_str!("../data/mini_qa.jsonl");

/// Names of the bundled synthetic datasets.
pub const BUILTIN_DATASETS: [&str; 2] = ["mini-er", "mini-qa"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErLine {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaTurnLine {
    pub q: String,
    pub answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaLine {
    pub id: String,
    pub story: String,
    pub turns: Vec<QaTurnLine>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<String>,
    pub path: String,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetItems {
    Er { samples: Vec<Sample>, labels: LabelSet },
    Qa { stories: Vec<Story> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    pub items: DatasetItems,
}

impl Dataset {
    pub fn task(&self) -> Task {
        self.descriptor.task
    }

    pub fn len(&self) -> usize {
        match &self.items {
            DatasetItems::Er { samples, .. } => samples.len(),
            DatasetItems::Qa { stories } => stories.iter().map(|s| s.turns.len()).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads a bundled set by name or a normalized file by path. The task is
    /// inferred from the records; `label_set` names a shipped label set or a
    /// JSON label-set file (default: IEMOCAP).
    pub fn load(name_or_path: &str, label_set: Option<&str>) -> Result<Self> {
        let (name, path, text) = match name_or_path {
            "mini-er" => ("mini-er".to_string(), "builtin:mini-er".to_string(), MINI_ER.to_string()),
            "mini-qa" => ("mini-qa".to_string(), "builtin:mini-qa".to_string(), MINI_QA.to_string()),
            p => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!(
                        "dataset `{p}`: {e} (bundled sets: {})",
                        BUILTIN_DATASETS.join(", ")
                    ))
                })?;
                let name = Path::new(p)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(p)
                    .to_string();
                (name, p.to_string(), text)
            }
        };
        Self::parse(&name, &path, &text, label_set)
    }

    pub fn parse(name: &str, path: &str, text: &str, label_set: Option<&str>) -> Result<Self> {
        let content_hash = sha256_hex(text.as_bytes());
        let task = infer_task(text)?;
        let (items, label_name) = match task {
            Task::Er => {
                let label_name = label_set.unwrap_or("iemocap");
                let labels = load_label_set(label_name)?;
                let samples = parse_er(name, text, &labels)?;
                (DatasetItems::Er { samples, labels }, Some(label_name.to_string()))
            }
            Task::Qa => (DatasetItems::Qa { stories: parse_qa(text)? }, None),
        };
        Ok(Self {
            descriptor: DatasetDescriptor {
                name: name.to_string(),
                task,
                label_set: label_name,
                path: path.to_string(),
                content_hash,
            },
            items,
        })
    }
}

/// A shipped label set by name, or a JSON file `{"labels":[..],"clause"?}`.
pub fn load_label_set(name_or_path: &str) -> Result<LabelSet> {
    if let Some(set) = LabelSet::builtin(name_or_path) {
        return Ok(set);
    }
    let text = fs::read_to_string(name_or_path)
        .map_err(|e| Error::Config(format!("label set `{name_or_path}`: {e} (shipped: iemocap, meld)")))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("label set `{name_or_path}`: {e}")))
}

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn infer_task(text: &str) -> Result<Task> {
    let (line, first) = non_empty_lines(text)
        .next()
        .ok_or_else(|| Error::DataIntegrity("dataset file is empty".into()))?;
    let v: serde_json::Value = serde_json::from_str(first)
        .map_err(|e| Error::DataIntegrity(format!("line {line}: {e}")))?;
    Ok(if v.get("story").is_some() { Task::Qa } else { Task::Er })
}

fn parse_er(dataset: &str, text: &str, labels: &LabelSet) -> Result<Vec<Sample>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, raw) in non_empty_lines(text) {
        let rec: ErLine =
            serde_json::from_str(raw).map_err(|e| Error::DataIntegrity(format!("line {line}: {e}")))?;
        if rec.text.trim().is_empty() {
            return Err(Error::DataIntegrity(format!("line {line}: sample `{}` has empty text", rec.id)));
        }
        if let Some(l) = &rec.label {
            if labels.index_of(l).is_none() {
                return Err(Error::DataIntegrity(format!(
                    "line {line}: label `{l}` of `{}` is not in the label set",
                    rec.id
                )));
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DataIntegrity(format!("line {line}: duplicate id `{}`", rec.id)));
        }
        out.push(Sample {
            id: rec.id,
            text: rec.text,
            gold_label: rec.label,
            dataset: dataset.to_string(),
        });
    }
    Ok(out)
}

fn parse_qa(text: &str) -> Result<Vec<Story>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, raw) in non_empty_lines(text) {
        let rec: QaLine =
            serde_json::from_str(raw).map_err(|e| Error::DataIntegrity(format!("line {line}: {e}")))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DataIntegrity(format!("line {line}: duplicate story id `{}`", rec.id)));
        }
        let story = Story {
            id: rec.id,
            text: rec.story,
            turns: rec
                .turns
                .into_iter()
                .enumerate()
                .map(|(index, t)| QaTurn {
                    index,
                    question: t.q,
                    references: t.answers,
                })
                .collect(),
        };
        story.validate()?;
        out.push(story);
    }
    Ok(out)
}

/// Turns stories back into file lines.
pub fn qa_lines(stories: &[Story]) -> Vec<QaLine> {
    stories
        .iter()
        .map(|s| QaLine {
            id: s.id.clone(),
            story: s.text.clone(),
            turns: s
                .turns
                .iter()
                .map(|t| QaTurnLine {
                    q: t.question.clone(),
                    answers: t.references.clone(),
                })
                .collect(),
        })
        .collect()
}

/// Raw emotion-recognition layouts accepted by [`convert_er`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErFormat {
    /// MELD CSV with `Utterance`, `Emotion`, `Dialogue_ID`, `Utterance_ID`.
    MeldCsv,
    /// Tab-separated `id<TAB>label<TAB>text`; labels may be IEMOCAP
    /// abbreviations (`neu`, `hap`, `xxx`, ...).
    IemocapLines,
}

impl std::str::FromStr for ErFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meld-csv" => Ok(ErFormat::MeldCsv),
            "iemocap-lines" => Ok(ErFormat::IemocapLines),
            _ => Err(Error::Config(format!("unknown format `{s}` (meld-csv, iemocap-lines)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub raw: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConvertSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub rejects_path: Option<PathBuf>,
}

/// Path of the rejects file written next to `output`.
pub fn rejects_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".rejects.jsonl");
    output.with_file_name(name)
}

fn iemocap_abbreviation(code: &str) -> Option<&'static str> {
    Some(match code.to_ascii_lowercase().as_str() {
        "neu" => "Neutral",
        "hap" => "Happiness",
        "sad" => "Sadness",
        "ang" => "Anger",
        "fru" => "Frustration",
        "fea" => "Fear",
        "exc" => "Excitement",
        "dis" => "Disgust",
        "sur" => "Surprise",
        "xxx" | "oth" => "Unknown",
        _ => return None,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_meld(source: &Path, labels: &LabelSet) -> Result<(Vec<ErLine>, Vec<Reject>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(source)
        .map_err(|e| Error::Config(format!("{}: {e}", source.display())))?;
    let headers = rdr.headers().map_err(|e| Error::DataIntegrity(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::DataIntegrity(format!("MELD CSV has no `{name}` column")))
    };
    let (c_text, c_label, c_dia, c_utt) = (col("Utterance")?, col("Emotion")?, col("Dialogue_ID")?, col("Utterance_ID")?);
    let mut accepted = Vec::new();
    let mut rejects = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                rejects.push(Reject {
                    line,
                    reason: e.to_string(),
                    raw: String::new(),
                });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let raw_label = rec[c_label].trim();
        match canonicalize_label(raw_label, labels) {
            Some(label) => accepted.push(ErLine {
                id: format!("dia{}_utt{}", rec[c_dia].trim(), rec[c_utt].trim()),
                text: rec[c_text].to_string(),
                label: Some(label.to_string()),
            }),
            None => rejects.push(Reject {
                line,
                reason: format!("unknown label `{raw_label}`"),
                raw: rec.iter().collect::<Vec<_>>().join(","),
            }),
        }
    }
    Ok((accepted, rejects))
}

fn read_iemocap(source: &Path, labels: &LabelSet) -> Result<(Vec<ErLine>, Vec<Reject>)> {
    let text = fs::read_to_string(source).map_err(|e| Error::Config(format!("{}: {e}", source.display())))?;
    let mut accepted = Vec::new();
    let mut rejects = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(3, '\t').collect();
        if fields.len() != 3 || fields[0].trim().is_empty() || fields[2].trim().is_empty() {
            rejects.push(Reject {
                line,
                reason: "expected id<TAB>label<TAB>text".into(),
                raw: raw.to_string(),
            });
            continue;
        }
        let raw_label = fields[1].trim();
        let label = canonicalize_label(raw_label, labels)
            .or_else(|| iemocap_abbreviation(raw_label).and_then(|l| canonicalize_label(l, labels)));
        match label {
            Some(label) => accepted.push(ErLine {
                id: fields[0].trim().to_string(),
                text: fields[2].to_string(),
                label: Some(label.to_string()),
            }),
            None => rejects.push(Reject {
                line,
                reason: format!("unknown label `{raw_label}`"),
                raw: raw.to_string(),
            }),
        }
    }
    Ok((accepted, rejects))
}

/// Converts a raw ER file into the normalized layout. Unusable rows go to
/// `<output>.rejects.jsonl` with their line numbers. `split` keeps only ids
/// starting with the given prefix.
pub fn convert_er(
    source: &Path,
    format: ErFormat,
    labels: &LabelSet,
    split: Option<&str>,
    output: &Path,
) -> Result<ConvertSummary> {
    let (mut accepted, rejects) = match format {
        ErFormat::MeldCsv => read_meld(source, labels)?,
        ErFormat::IemocapLines => read_iemocap(source, labels)?,
    };
    if let Some(prefix) = split {
        accepted.retain(|r| r.id.starts_with(prefix));
    }
    let mut seen = BTreeSet::new();
    for r in &accepted {
        if !seen.insert(&r.id) {
            return Err(Error::DataIntegrity(format!("duplicate id `{}` in {}", r.id, source.display())));
        }
    }
    write_jsonl(output, &accepted)?;
    let rp = rejects_path(output);
    let rejects_path = if rejects.is_empty() {
        let _ = fs::remove_file(&rp);
        None
    } else {
        write_jsonl(&rp, &rejects)?;
        Some(rp)
    };
    Ok(ConvertSummary {
        accepted: accepted.len(),
        rejected: rejects.len(),
        rejects_path,
    })
}

#[derive(Clone, Debug, Deserialize)]
struct CoqaFile {
    data: Vec<CoqaStory>,
}

#[derive(Clone, Debug, Deserialize)]
struct CoqaStory {
    id: String,
    story: String,
    questions: Vec<CoqaText>,
    answers: Vec<CoqaText>,
    #[serde(default)]
    additional_answers: BTreeMap<String, Vec<CoqaText>>,
}

#[derive(Clone, Debug, Deserialize)]
struct CoqaText {
    input_text: String,
    turn_id: u64,
}

fn by_turn(mut v: Vec<CoqaText>) -> Vec<CoqaText> {
    v.sort_by_key(|t| t.turn_id);
    v
}

/// Parses the CoQA JSON layout. References are the primary answer followed by
/// the additional answers in key order.
pub fn parse_coqa(text: &str) -> Result<Vec<Story>> {
    let file: CoqaFile =
        serde_json::from_str(text).map_err(|e| Error::DataIntegrity(format!("CoQA JSON: {e}")))?;
    let mut out = Vec::with_capacity(file.data.len());
    for s in file.data {
        let questions = by_turn(s.questions);
        let answers = by_turn(s.answers);
        if questions.len() != answers.len() {
            return Err(Error::DataIntegrity(format!(
                "story `{}` has {} questions but {} answers",
                s.id,
                questions.len(),
                answers.len()
            )));
        }
        let extra: Vec<(String, Vec<CoqaText>)> = s
            .additional_answers
            .into_iter()
            .map(|(k, v)| (k, by_turn(v)))
            .collect();
        for (k, v) in &extra {
            if v.len() != questions.len() {
                return Err(Error::DataIntegrity(format!(
                    "story `{}` has {} questions but {} additional answers in set `{k}`",
                    s.id,
                    questions.len(),
                    v.len()
                )));
            }
        }
        let turns = questions
            .into_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut references = vec![answers[i].input_text.clone()];
                references.extend(extra.iter().map(|(_, v)| v[i].input_text.clone()));
                QaTurn {
                    index: i,
                    question: q.input_text,
                    references,
                }
            })
            .collect();
        let story = Story {
            id: s.id,
            text: s.story,
            turns,
        };
        story.validate()?;
        out.push(story);
    }
    Ok(out)
}

/// Converts a CoQA JSON file into the normalized QA layout.
pub fn convert_coqa(source: &Path, output: &Path) -> Result<usize> {
    let text = fs::read_to_string(source).map_err(|e| Error::Config(format!("{}: {e}", source.display())))?;
    let stories = parse_coqa(&text)?;
    write_jsonl(output, &qa_lines(&stories))?;
    Ok(stories.len())
}

/// Writes stories or samples in the normalized layout.
pub fn write_er(path: &Path, samples: &[Sample]) -> Result<()> {
    let lines: Vec<ErLine> = samples
        .iter()
        .map(|s| ErLine {
            id: s.id.clone(),
            text: s.text.clone(),
            label: s.gold_label.clone(),
        })
        .collect();
    write_jsonl(path, &lines)
}

pub fn write_qa(path: &Path, stories: &[Story]) -> Result<()> {
    write_jsonl(path, &qa_lines(stories))
}
