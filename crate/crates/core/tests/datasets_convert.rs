use std::fs;

use imagine_harness::datasets::{
    convert_coqa, convert_er, write_er, write_qa, Dataset, DatasetItems, ErFormat,
};
use imagine_harness::datamodel::LabelSet;
use tempfile::TempDir;

const MELD: &str = "Sr No.,Utterance,Speaker,Emotion,Sentiment,Dialogue_ID,Utterance_ID,Season\n\
1,\"Well, you know, it's fine.\",Joey,neutral,neutral,3,0,1\n\
2,\"He said \"\"no\"\"!\",Phoebe,surprise,negative,3,1,1\n\
3,I can't believe it,Ross,sadness,negative,4,0,1\n\
4,Ugh.,Monica,disgust,negative,4,1,1\n";

const COQA: &str = r#"{"version":"1.0","data":[
 {"id":"a","source":"x","story":"One. Two.","questions":[{"input_text":"Q1?","turn_id":1}],
  "answers":[{"input_text":"one","turn_id":1}]},
 {"id":"b","source":"x","story":"Three.","questions":[{"input_text":"Q2?","turn_id":1},{"input_text":"Q3?","turn_id":2}],
  "answers":[{"input_text":"three","turn_id":1},{"input_text":"","turn_id":2}],
  "additional_answers":{"0":[{"input_text":"3","turn_id":1},{"input_text":"unknown","turn_id":2}]}}
]}"#;

#[test]
fn er_conversion_is_idempotent_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("meld.csv");
    fs::write(&src, MELD).unwrap();
    let labels = LabelSet::meld();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    let sa = convert_er(&src, ErFormat::MeldCsv, &labels, None, &a).unwrap();
    let sb = convert_er(&src, ErFormat::MeldCsv, &labels, None, &b).unwrap();
    assert_eq!(sa.accepted, 4);
    assert_eq!(sa.rejected, 0);
    assert!(sa.rejects_path.is_none());
    assert_eq!(sb.accepted, 4);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());

    let d = Dataset::load(a.to_str().unwrap(), Some("meld")).unwrap();
    let DatasetItems::Er { samples, .. } = &d.items else { panic!("ER") };
    assert_eq!(samples[1].text, "He said \"no\"!");
    assert_eq!(samples[1].id, "dia3_utt1");
    let back = tmp.path().join("back.jsonl");
    write_er(&back, samples).unwrap();
    assert_eq!(fs::read(&back).unwrap(), bytes);
}

#[test]
fn qa_conversion_is_idempotent_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("coqa.json");
    fs::write(&src, COQA).unwrap();
    let a = tmp.path().join("a.jsonl");
    assert_eq!(convert_coqa(&src, &a).unwrap(), 2);
    let bytes = fs::read(&a).unwrap();
    convert_coqa(&src, &a).unwrap();
    assert_eq!(fs::read(&a).unwrap(), bytes);

    let d = Dataset::load(a.to_str().unwrap(), None).unwrap();
    assert_eq!(d.len(), 3);
    let DatasetItems::Qa { stories } = &d.items else { panic!("QA") };
    assert_eq!(stories[1].turns[1].references, ["", "unknown"]);
    let back = tmp.path().join("back.jsonl");
    write_qa(&back, stories).unwrap();
    assert_eq!(fs::read(&back).unwrap(), bytes);
}

#[test]
fn bundled_sets_round_trip_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let er = Dataset::load("mini-er", None).unwrap();
    let DatasetItems::Er { samples, .. } = &er.items else { panic!("ER") };
    let path = tmp.path().join("er.jsonl");
    write_er(&path, samples).unwrap();
    let reloaded = Dataset::load(path.to_str().unwrap(), None).unwrap();
    assert_eq!(reloaded.descriptor.content_hash, er.descriptor.content_hash);

    let qa = Dataset::load("mini-qa", None).unwrap();
    let DatasetItems::Qa { stories } = &qa.items else { panic!("QA") };
    let path = tmp.path().join("qa.jsonl");
    write_qa(&path, stories).unwrap();
    let reloaded = Dataset::load(path.to_str().unwrap(), None).unwrap();
    assert_eq!(reloaded.descriptor.content_hash, qa.descriptor.content_hash);
}

#[test]
fn mismatched_answer_sets_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("coqa.json");
    let bad = COQA.replace(r#"{"input_text":"unknown","turn_id":2}"#, "").replace("},]", "}]");
    fs::write(&src, bad).unwrap();
    let err = convert_coqa(&src, &tmp.path().join("out.jsonl")).unwrap_err().to_string();
    assert!(err.contains("`b`"), "{err}");
}
