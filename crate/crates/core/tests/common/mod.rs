//! Generators and brute-force oracles shared by the property tests and the
//! acceptance target.
#![allow(dead_code)]

use proptest::prelude::*;
use serde::Deserialize;

use imagine_harness::segmentation::TokenizedText;

/// One random classification instance: label count and (gold, pred) pairs.
#[derive(Clone, Debug)]
pub struct Instance {
    pub n_labels: usize,
    pub pairs: Vec<(usize, usize)>,
}

pub fn instance() -> impl Strategy<Value = Instance> {
    (2usize..=10).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 1..=200).prop_map(move |pairs| Instance { n_labels: n, pairs })
    })
}

/// Weighted F1 and accuracy straight from the definitions, one label at a time.
pub fn oracle_scores(inst: &Instance) -> (f64, f64) {
    let n = inst.pairs.len() as f64;
    let mut wf1 = 0.0;
    for label in 0..inst.n_labels {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for &(g, p) in &inst.pairs {
            match (g == label, p == label) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let support = tp + fn_;
        // F1 = 2TP / (2TP + FP + FN), which is 0 when TP is 0.
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        wf1 += support / n * f1;
    }
    let correct = inst.pairs.iter().filter(|(g, p)| g == p).count() as f64;
    (wf1, correct / n)
}

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        6 => "[a-z]{1,8}",
        1 => "[A-Z][a-z]{0,6}",
        1 => Just("café".to_string()),
        1 => Just("naïve".to_string()),
        1 => Just("Mr.".to_string()),
        1 => Just("3.5".to_string()),
        1 => Just("don't".to_string()),
    ]
}

fn sentence() -> impl Strategy<Value = String> {
    (
        prop::collection::vec(word(), 2..14),
        prop_oneof![6 => Just("."), 1 => Just("!"), 1 => Just("?"), 1 => Just("...")],
        prop_oneof![4 => Just(" "), 1 => Just("  "), 1 => Just("\n")],
    )
        .prop_map(|(words, end, gap)| format!("{}{end}{gap}", words.join(" ")))
}

/// A multi-sentence story of roughly 30 to 400 tokens.
pub fn story() -> impl Strategy<Value = String> {
    prop::collection::vec(sentence(), 3..25).prop_map(|s| s.concat().trim_end().to_string())
}

/// Every '.' as (character offset just after it, token boundary index),
/// found by scanning characters and counting token starts by hand.
pub fn full_stops_by_scan(tok: &TokenizedText) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ci, c) in tok.text().chars().enumerate() {
        if c == '.' {
            let after = ci + 1;
            let tb = tok.tokens().iter().filter(|t| t.char_start < after).count();
            out.push((after, tb));
        }
    }
    out
}

/// Brute-force snap: the '.' closest in tokens to `index`, earliest on ties.
pub fn snap_by_scan(tok: &TokenizedText, index: usize) -> usize {
    let mut best: Option<(usize, usize, usize)> = None;
    for (off, tb) in full_stops_by_scan(tok) {
        let d = tb.abs_diff(index);
        if best.is_none_or(|(bd, boff, _)| d < bd || (d == bd && off < boff)) {
            best = Some((d, off, tb));
        }
    }
    match best {
        Some((_, off, _)) => off,
        None => tok.tokens()[index].char_start,
    }
}

#[derive(Deserialize)]
pub struct CoqaCase {
    pub name: String,
    pub pred: String,
    pub refs: Vec<String>,
    pub f1: [u32; 2],
}

#[derive(Deserialize)]
struct CoqaCases {
    cases: Vec<CoqaCase>,
}

pub fn coqa_cases() -> Vec<CoqaCase> {
    let cases: CoqaCases =
        serde_json::from_str(include_str!("../goldens/coqa_cases.json")).expect("CoQA cases parse");
    cases.cases
}

#[derive(Deserialize)]
pub struct PromptGolden {
    pub spec: String,
    pub text: String,
    pub prompt: String,
}

#[derive(Deserialize)]
pub struct PromptGoldens {
    pub label_clause: String,
    pub prompts: Vec<PromptGolden>,
}

pub fn prompt_goldens() -> PromptGoldens {
    serde_json::from_str(include_str!("../goldens/er_prompts.json")).expect("golden file parses")
}

/// Deterministic pseudo-embedding keyed by text, for mapping properties.
pub fn keyed_vector(text: &str, dim: usize, salt: u64) -> Vec<f64> {
    use std::hash::Hasher;
    (0..dim)
        .map(|i| {
            let mut h = fnv::FnvHasher::default();
            h.write(text.as_bytes());
            h.write_u64(salt);
            h.write_usize(i);
            (h.finish() % 2001) as f64 / 1000.0 - 1.0
        })
        .collect()
}
