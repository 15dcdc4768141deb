//! Classification metrics (confusion matrix, accuracy, weighted F1) and
//! CoQA-style token-overlap F1.
//!
//! Answer normalization follows the official CoQA evaluation script:
//! lowercase, drop ASCII punctuation, drop the articles "a", "an", "the",
//! split on whitespace. A question scores the best F1 over its references and
//! the overall F1 is the mean over questions.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datamodel::{canonicalize_label, parse_turn_record_id, LabelSet, PredictionRecord, RecordFlag, Story, Task};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Row-major counts; rows are gold labels, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: LabelSet,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: LabelSet) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![0; n * n],
        }
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.size() + pred]
    }

    pub fn add_index(&mut self, gold: usize, pred: usize) {
        let n = self.size();
        self.counts[gold * n + pred] += 1;
    }

    /// Adds one (gold, prediction) pair given as label strings.
    pub fn add(&mut self, gold: &str, pred: &str) -> Result<()> {
        let g = self
            .labels
            .index_of(gold)
            .ok_or_else(|| Error::DataIntegrity(format!("gold label `{gold}` is not in the label set")))?;
        let p = self
            .labels
            .index_of(pred)
            .ok_or_else(|| Error::DataIntegrity(format!("prediction `{pred}` is not in the label set")))?;
        self.add_index(g, p);
        Ok(())
    }

    /// Element-wise sum of two matrices over the same labels.
    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        assert_eq!(self.labels, other.labels, "merging matrices over different labels");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    /// Builds a matrix from label-index pairs, in chunks merged pairwise when
    /// `exec` is parallel.
    pub fn from_pairs(labels: &LabelSet, pairs: &[(usize, usize)], exec: Execution) -> Self {
        const CHUNK: usize = 4096;
        let chunks: Vec<&[(usize, usize)]> = pairs.chunks(CHUNK).collect();
        let partials = par::map_ordered(exec, &chunks, |chunk| {
            let mut cm = ConfusionMatrix::new(labels.clone());
            for &(g, p) in *chunk {
                cm.add_index(g, p);
            }
            cm
        });
        partials
            .iter()
            .fold(ConfusionMatrix::new(labels.clone()), |acc, cm| acc.merge(cm))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.get(i, i)).sum()
    }

    pub fn support(&self, label: usize) -> u64 {
        (0..self.size()).map(|j| self.get(label, j)).sum()
    }

    pub fn predicted(&self, label: usize) -> u64 {
        (0..self.size()).map(|i| self.get(i, label)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub wf1: f64,
    pub accuracy: f64,
    pub per_label: indexmap::IndexMap<String, LabelScores>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Weighted F1, accuracy and per-label scores; 0/0 counts as 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<ClassificationScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("weighted F1 of an empty confusion matrix".into()));
    }
    let mut per_label = indexmap::IndexMap::new();
    let mut wf1 = 0.0;
    for (i, label) in cm.labels().labels().iter().enumerate() {
        let tp = cm.get(i, i);
        let support = cm.support(i);
        let precision = ratio(tp, cm.predicted(i));
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        wf1 += support as f64 / total as f64 * f1;
        per_label.insert(
            label.clone(),
            LabelScores {
                precision,
                recall,
                f1,
                support,
            },
        );
    }
    Ok(ClassificationScores {
        wf1,
        accuracy: ratio(cm.trace(), total),
        per_label,
    })
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("static regex"))
}

/// Lowercase, drop ASCII punctuation, drop articles, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().map(str::to_string).collect()
}

/// Bag-of-tokens F1 between normalized answers.
pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let p = normalize_answer(pred);
    let r = normalize_answer(reference);
    if p.is_empty() || r.is_empty() {
        return if p == r { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best [`token_f1`] over the references.
pub fn max_over_references(pred: &str, references: &[String]) -> f64 {
    references
        .iter()
        .map(|r| token_f1(pred, r))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErReport {
    pub wf1: f64,
    pub accuracy: f64,
    pub per_label: indexmap::IndexMap<String, LabelScores>,
    /// Zero-denominator precision/recall/F1 are reported as 0.
    pub zero_division: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    /// Mean over questions of the best reference F1, as a fraction.
    pub of1: f64,
    pub per_story: BTreeMap<String, f64>,
    pub n_questions: usize,
    /// Questions without a (non-failed) prediction; they score 0.
    pub n_missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: Task,
    pub spec: String,
    pub n_scored: usize,
    pub n_fallback: usize,
    pub n_failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub er: Option<ErReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<QaReport>,
}

/// A gold label per sample id.
pub type GoldLabels = BTreeMap<String, String>;

/// Scores ER predictions. Failed records are not scored.
pub fn score_er(
    spec_name: &str,
    records: &[PredictionRecord],
    gold: &GoldLabels,
    labels: &LabelSet,
    exec: Execution,
) -> Result<ScoreReport> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut n_failed = 0;
    let mut n_fallback = 0;
    for r in records {
        if r.has(RecordFlag::Failed) {
            n_failed += 1;
            continue;
        }
        if r.has(RecordFlag::EmptyExtractionFallback) {
            n_fallback += 1;
        }
        let g = gold
            .get(&r.sample_id)
            .ok_or_else(|| Error::DataIntegrity(format!("no gold label for `{}`", r.sample_id)))?;
        let gi = labels
            .index_of(g)
            .ok_or_else(|| Error::DataIntegrity(format!("gold label `{g}` of `{}` is not a label", r.sample_id)))?;
        let pi = canonicalize_label(&r.prediction, labels)
            .and_then(|l| labels.index_of(l))
            .ok_or_else(|| {
                Error::DataIntegrity(format!("prediction `{}` of `{}` is not a label", r.prediction, r.sample_id))
            })?;
        pairs.push((gi, pi));
    }
    let cm = ConfusionMatrix::from_pairs(labels, &pairs, exec);
    let er = if pairs.is_empty() {
        None
    } else {
        let s = weighted_f1(&cm)?;
        Some(ErReport {
            wf1: s.wf1,
            accuracy: s.accuracy,
            per_label: s.per_label,
            zero_division: 0.0,
        })
    };
    Ok(ScoreReport {
        task: Task::Er,
        spec: spec_name.to_string(),
        n_scored: pairs.len(),
        n_fallback,
        n_failed,
        er,
        qa: None,
    })
}

/// Scores QA predictions against the stories' reference answers.
pub fn coqa_overall_f1(spec_name: &str, records: &[PredictionRecord], stories: &[Story]) -> Result<ScoreReport> {
    let mut refs: HashMap<(&str, usize), &[String]> = HashMap::new();
    for s in stories {
        for t in &s.turns {
            refs.insert((s.id.as_str(), t.index), &t.references);
        }
    }
    let mut best: HashMap<(&str, usize), f64> = HashMap::new();
    let mut n_failed = 0;
    for r in records {
        let key = parse_turn_record_id(&r.sample_id)
            .filter(|k| refs.contains_key(k))
            .ok_or_else(|| Error::DataIntegrity(format!("record `{}` matches no question", r.sample_id)))?;
        if r.has(RecordFlag::Failed) {
            n_failed += 1;
            continue;
        }
        let (&owned_key, references) = refs.get_key_value(&key).expect("checked above");
        best.insert(owned_key, max_over_references(&r.prediction, references));
    }
    let mut per_story = BTreeMap::new();
    let mut sum = 0.0;
    let mut n_questions = 0;
    for s in stories {
        let scores: Vec<f64> = s
            .turns
            .iter()
            .map(|t| best.get(&(s.id.as_str(), t.index)).copied().unwrap_or(0.0))
            .collect();
        n_questions += scores.len();
        sum += scores.iter().sum::<f64>();
        let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
        per_story.insert(s.id.clone(), mean);
    }
    let of1 = if n_questions == 0 { 0.0 } else { sum / n_questions as f64 };
    Ok(ScoreReport {
        task: Task::Qa,
        spec: spec_name.to_string(),
        n_scored: best.len(),
        n_fallback: 0,
        n_failed,
        er: None,
        qa: Some(QaReport {
            of1,
            per_story,
            n_questions,
            n_missing: n_questions - best.len(),
        }),
    })
}

/// Row labels for the results table.
fn describe(spec: &str) -> (&'static str, &'static str) {
    match spec {
        "LLM_Baseline" => ("Unimodal", "No"),
        "LLM_Baseline_OP" => ("Unimodal", "Yes"),
        _ if spec.starts_with("LLM_") => ("Unimodal", "-"),
        _ => ("Multimodal", "No"),
    }
}

/// Aligned plain-text table of several reports (one row each).
pub fn render_table(reports: &[ScoreReport]) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let er = reports.iter().all(|r| r.task == Task::Er);
    let header: &[&str] = if er {
        &["Experiments", "Modality", "Output Processing", "WF1(%)", "Acc(%)"]
    } else {
        &["Experiments", "Modality", "OF1(%)"]
    };
    rows.push(header.iter().map(|h| h.to_string()).collect());
    for r in reports {
        let (modality, op) = describe(&r.spec);
        let mut row = vec![r.spec.clone(), modality.to_string()];
        if er {
            row.push(op.to_string());
            match &r.er {
                Some(e) => {
                    row.push(format!("{:.2}", e.wf1 * 100.0));
                    row.push(format!("{:.2}", e.accuracy * 100.0));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        } else {
            row.push(match &r.qa {
                Some(q) => format!("{:.2}", q.of1 * 100.0),
                None => "-".to_string(),
            });
        }
        rows.push(row);
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}
