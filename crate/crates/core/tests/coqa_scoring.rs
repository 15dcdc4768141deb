mod common;

use std::collections::BTreeSet;

use imagine_harness::datamodel::{PredictionRecord, QaTurn, RecordFlag, Story};
use imagine_harness::metrics::{coqa_overall_f1, max_over_references, normalize_answer, token_f1};

#[test]
fn hand_computed_fixtures() {
    let cases = common::coqa_cases();
    assert!(cases.len() >= 20);
    for c in cases {
        let expected = f64::from(c.f1[0]) / f64::from(c.f1[1]);
        let got = max_over_references(&c.pred, &c.refs);
        assert!((got - expected).abs() < 1e-12, "{}: got {got}, expected {expected}", c.name);
    }
}

#[test]
fn normalization_steps() {
    assert_eq!(normalize_answer("The Cat, the HAT!"), ["cat", "hat"]);
    assert_eq!(normalize_answer("an"), Vec::<String>::new());
    assert_eq!(normalize_answer("A-team"), ["ateam"]);
    assert_eq!(normalize_answer("there then"), ["there", "then"]);
}

#[test]
fn token_f1_is_symmetric_on_fixtures() {
    for c in common::coqa_cases() {
        for r in &c.refs {
            assert_eq!(token_f1(&c.pred, r), token_f1(r, &c.pred), "{}", c.name);
        }
    }
}

fn record(id: &str, prediction: &str, failed: bool) -> PredictionRecord {
    let mut flags = BTreeSet::new();
    if failed {
        flags.insert(RecordFlag::Failed);
    }
    PredictionRecord {
        sample_id: id.into(),
        raw_output: prediction.into(),
        extracted: prediction.into(),
        prediction: prediction.into(),
        scores: Default::default(),
        image_keys: vec![],
        latency_ms: 0,
        flags,
    }
}

fn turn(index: usize, q: &str, refs: &[&str]) -> QaTurn {
    QaTurn { index, question: q.into(), references: refs.iter().map(|s| s.to_string()).collect() }
}

#[test]
fn overall_f1_averages_questions_not_stories() {
    let stories = vec![
        Story {
            id: "s1".into(),
            text: "x".into(),
            turns: vec![
                turn(0, "q0", &["red"]),
                turn(1, "q1", &["her brother fixed it"]),
                turn(2, "q2", &["geese"]),
            ],
        },
        Story { id: "s2".into(), text: "y".into(), turns: vec![turn(0, "q0", &["1902"])] },
    ];
    let records = vec![
        record("s1#0", "Red.", false),
        record("s1#1", "her brother", false),
        record("s1#2", "geese", true),
        record("s2#0", "In 1902", false),
    ];
    let r = coqa_overall_f1("x", &records, &stories).unwrap();
    let qa = r.qa.unwrap();
    // s1: (1 + 2/3 + 0) / 3; s2: 2/3; overall: (1 + 2/3 + 0 + 2/3) / 4
    assert!((qa.of1 - 7.0 / 12.0).abs() < 1e-12);
    assert!((qa.per_story["s1"] - 5.0 / 9.0).abs() < 1e-12);
    assert!((qa.per_story["s2"] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(qa.n_questions, 4);
    assert_eq!(qa.n_missing, 1);
    assert_eq!(r.n_failed, 1);
    assert_eq!(r.n_scored, 3);

    let stray = vec![record("s3#0", "x", false)];
    assert!(coqa_overall_f1("x", &stray, &stories).is_err());
}
