use std::fs;
use std::path::Path;
use std::sync::Arc;

use imagine_harness::backends::mock::{MockBackends, MockFixture};
use imagine_harness::backends::server::MockServer;
use imagine_harness::backends::wire::Route;
use imagine_harness::cli::{self, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use imagine_harness::datamodel::ExperimentSpec;
use imagine_harness::datasets::{rejects_path, Dataset, DatasetItems, Reject};
use imagine_harness::metrics::ScoreReport;
use tempfile::TempDir;

fn mh(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mh").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_happy_path_writes_the_report() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    let cache = tmp.path().join("cache");
    let (code, out, err) = mh(&[
        "run", "--spec", "Gen_Image_Inp_Text_Both", "--dataset", "mini-er", "--backends", "mock",
        "--out-dir", p(&runs), "--cache-dir", p(&cache), "--run-id", "r1", "--image-size", "16",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("Gen_Image_Inp_Text_Both"), "{out}");
    let report: ScoreReport = serde_json::from_slice(&fs::read(runs.join("r1/report.json")).unwrap()).unwrap();
    assert_eq!(report.spec, "Gen_Image_Inp_Text_Both");
    assert_eq!(report.n_scored, 24);
    assert!(runs.join("r1/run.json").exists());
    assert!(runs.join("r1/table.txt").exists());
}

#[test]
fn unknown_spec_is_a_usage_error_listing_the_names() {
    let tmp = TempDir::new().unwrap();
    let (code, _, err) = mh(&[
        "run", "--spec", "Gen_Image_Both", "--dataset", "mini-er", "--out-dir", p(tmp.path()),
    ]);
    assert_eq!(code, EXIT_USAGE);
    for name in ExperimentSpec::TABLE_NAMES {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn special_directive_on_qa_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (code, _, err) = mh(&[
        "run", "--spec", "Gen_Image_Inp_Text_P1", "--dataset", "mini-qa", "--out-dir", p(tmp.path()),
    ]);
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn missing_subcommand_and_bad_flags_exit_2() {
    assert_eq!(mh(&[]).0, EXIT_USAGE);
    assert_eq!(mh(&["run", "--no-such-flag"]).0, EXIT_USAGE);
    assert_eq!(mh(&["run", "--dataset", "mini-er"]).0, EXIT_USAGE);
    assert_eq!(mh(&["--help"]).0, EXIT_OK);
}

#[test]
fn score_is_repeatable_and_matches_the_run() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    let (code, _, err) = mh(&[
        "run", "--spec", "Gen_Image_Inp_Text_P1", "--dataset", "mini-er", "--out-dir", p(&runs),
        "--cache-dir", p(&tmp.path().join("cache")), "--run-id", "r", "--image-size", "16",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let preds = runs.join("r/predictions.jsonl");
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    for out in [&a, &b] {
        let (code, _, err) = mh(&["score", "--predictions", p(&preds), "--task", "er", "--out", p(out)]);
        assert_eq!(code, EXIT_OK, "{err}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(&a).unwrap(), fs::read(runs.join("r/report.json")).unwrap());

    let (code, stdout, _) = mh(&["score", "--predictions", p(&preds), "--task", "er", "--dataset", "mini-er"]);
    assert_eq!(code, EXIT_OK);
    let report: ScoreReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report.spec, "Gen_Image_Inp_Text_P1");

    let (code, _, _) = mh(&["score", "--predictions", p(&preds), "--task", "qa"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn imagine_then_run_over_http_makes_no_t2i_calls() {
    let mock = Arc::new(MockBackends::new(MockFixture::bundled()).unwrap());
    let server = MockServer::start(mock.clone(), "127.0.0.1:0").unwrap();
    let url = server.url();
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    let cache = tmp.path().join("cache");
    let common = [
        "--dataset", "mini-qa", "--backends", url.as_str(), "--out-dir", p(&runs), "--cache-dir", p(&cache),
        "--image-size", "16",
    ];
    let mut args = vec!["imagine"];
    args.extend(common);
    let (code, out, err) = mh(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("3 stories segmented"), "{out}");
    assert!(mock.calls(Route::T2i) > 0);

    mock.reset_counters();
    let mut args = vec!["run", "--matrix", "--run-id", "m"];
    args.extend(common);
    let (code, _, err) = mh(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let stats: serde_json::Value =
        reqwest::blocking::get(format!("{url}/mock/stats")).unwrap().json().unwrap();
    assert_eq!(stats["t2i"], 0);
    assert_eq!(stats["segment"], 0);
    assert!(stats["mm-generate"].as_u64().unwrap() > 0);
    assert!(runs.join("m/matrix.json").exists());
}

#[test]
fn stop_after_then_resume_by_id() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    let cache = tmp.path().join("cache");
    let (code, out, _) = mh(&[
        "run", "--spec", "Gen_Image_Inp_Text_Txt", "--dataset", "mini-er", "--out-dir", p(&runs),
        "--cache-dir", p(&cache), "--run-id", "r", "--image-size", "16", "--stop-after", "5",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("--resume r"), "{out}");
    assert!(!runs.join("r/report.json").exists());
    let (code, _, err) = mh(&["run", "--resume", "r", "--out-dir", p(&runs), "--cache-dir", p(&cache)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(runs.join("r/report.json").exists());
    let (code, _, _) = mh(&["run", "--resume", "nope", "--out-dir", p(&runs)]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn aborted_run_exits_1() {
    let tmp = TempDir::new().unwrap();
    let mut fixture = MockFixture::bundled();
    fixture.fail_first.insert("mm-generate".into(), 1000);
    let backends = imagine_harness::backends::BackendsFile::uniform("inproc", Some(fixture));
    let mut file = serde_json::to_value(&backends).unwrap();
    for b in file["backends"].as_array_mut().unwrap() {
        b["max_retries"] = 0.into();
    }
    let path = tmp.path().join("backends.json");
    fs::write(&path, serde_json::to_vec(&file).unwrap()).unwrap();
    let (code, _, err) = mh(&[
        "run", "--spec", "Gen_Image_Inp_Text_Both", "--dataset", "mini-er", "--backends", p(&path),
        "--out-dir", p(&tmp.path().join("runs")), "--cache-dir", p(&tmp.path().join("cache")),
        "--image-size", "16", "--parallelism", "1",
    ]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("aborted"), "{err}");
}

#[test]
fn config_file_drives_a_run() {
    let tmp = TempDir::new().unwrap();
    let config = serde_json::json!({
        "specs": ["Gen_Image_Inp_Text_Img"],
        "dataset": "mini-er",
        "backends": "mock",
        "out_dir": tmp.path().join("runs"),
        "cache_dir": tmp.path().join("cache"),
        "image_size": 16
    });
    let path = tmp.path().join("run.json");
    fs::write(&path, config.to_string()).unwrap();
    let (code, _, err) = mh(&["run", "--config", p(&path), "--run-id", "c"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(tmp.path().join("runs/c/report.json").exists());

    fs::write(&path, r#"{"dataset": "mini-er", "bogus": 1}"#).unwrap();
    assert_eq!(mh(&["run", "--config", p(&path)]).0, EXIT_USAGE);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = TempDir::new().unwrap();
    let (code, _, err) = mh(&[
        "run", "--config", p(&root.join("run-mini-er.json")), "--out-dir", p(&tmp.path().join("runs")),
        "--cache-dir", p(&tmp.path().join("cache")), "--image-size", "16", "--run-id", "x",
        "--backends", p(&root.join("mock-backends.json")),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let fixture: MockFixture =
        serde_json::from_str(&fs::read_to_string(root.join("mock-fixture.json")).unwrap()).unwrap();
    MockBackends::new(fixture).unwrap();
}

#[test]
fn report_renders_runs_and_matrices() {
    let tmp = TempDir::new().unwrap();
    let runs = tmp.path().join("runs");
    for (spec, id) in [("Gen_Image_Inp_Text_Both", "a"), ("LLM_Baseline", "b")] {
        let (code, _, err) = mh(&[
            "run", "--spec", spec, "--dataset", "mini-er", "--out-dir", p(&runs), "--cache-dir",
            p(&tmp.path().join("cache")), "--run-id", id, "--image-size", "16",
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
    }
    let (code, out, _) = mh(&["report", p(&runs.join("a")), p(&runs.join("b/report.json"))]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("Gen_Image_Inp_Text_Both") && out.contains("LLM_Baseline"), "{out}");
    let table = tmp.path().join("t.txt");
    assert_eq!(mh(&["report", p(&runs.join("a")), "--out", p(&table)]).0, EXIT_OK);
    assert!(fs::read_to_string(&table).unwrap().contains("Gen_Image_Inp_Text_Both"));
    assert_eq!(mh(&["report", p(&tmp.path().join("missing"))]).0, EXIT_USAGE);
}

#[test]
fn convert_meld_csv_with_rejects() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("meld.csv");
    fs::write(
        &src,
        "Sr No.,Utterance,Speaker,Emotion,Sentiment,Dialogue_ID,Utterance_ID\n\
         1,\"Oh, really?\",Ross,surprise,positive,0,0\n\
         2,Get out.,Monica,anger,negative,0,1\n\
         3,What a day,Chandler,bored,neutral,1,0\n\
         4,\"Yes, I'd love to!\",Rachel,joy,positive,1,1\n",
    )
    .unwrap();
    let out_path = tmp.path().join("meld.jsonl");
    let (code, out, err) = mh(&["convert", "--format", "meld-csv", "--input", p(&src), "--output", p(&out_path)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("wrote 3 records"), "{out}");
    assert_eq!(
        fs::read_to_string(&out_path).unwrap(),
        "{\"id\":\"dia0_utt0\",\"text\":\"Oh, really?\",\"label\":\"Surprise\"}\n\
         {\"id\":\"dia0_utt1\",\"text\":\"Get out.\",\"label\":\"Anger\"}\n\
         {\"id\":\"dia1_utt1\",\"text\":\"Yes, I'd love to!\",\"label\":\"Joy\"}\n"
    );
    let rejects: Vec<Reject> = fs::read_to_string(rejects_path(&out_path))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rejects.len(), 1);
    assert_eq!(rejects[0].line, 4);
    assert!(rejects[0].reason.contains("bored"));

    let d = Dataset::load(p(&out_path), Some("meld")).unwrap();
    assert_eq!(d.len(), 3);

    let split_path = tmp.path().join("dia1.jsonl");
    let (code, _, _) = mh(&[
        "convert", "--format", "meld-csv", "--input", p(&src), "--output", p(&split_path), "--split", "dia1_",
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_to_string(&split_path).unwrap().lines().count(), 1);
}

#[test]
fn convert_iemocap_lines() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("iemocap.tsv");
    fs::write(
        &src,
        "# id\tlabel\ttext\n\
         Ses01F_impro01_F000\tneu\tExcuse me.\n\
         Ses01F_impro01_M000\txxx\tDo you have your forms?\n\
         Ses01F_impro01_F001\tHappiness\tYes!\n\
         Ses01F_impro01_F002\tjoy\tHooray\n\
         broken line without tabs\n",
    )
    .unwrap();
    let out_path = tmp.path().join("iemocap.jsonl");
    let (code, out, err) = mh(&["convert", "--format", "iemocap-lines", "--input", p(&src), "--output", p(&out_path)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("wrote 3 records") && out.contains("2 rejected"), "{out}");
    let d = Dataset::load(p(&out_path), None).unwrap();
    let DatasetItems::Er { samples, .. } = &d.items else { panic!("ER") };
    let labels: Vec<&str> = samples.iter().map(|s| s.gold_label.as_deref().unwrap()).collect();
    assert_eq!(labels, ["Neutral", "Unknown", "Happiness"]);
    let rejects = fs::read_to_string(rejects_path(&out_path)).unwrap();
    let lines: Vec<Reject> = rejects.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().map(|r| r.line).collect::<Vec<_>>(), [5, 6]);
}

#[test]
fn convert_coqa() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("coqa.json");
    fs::write(
        &src,
        serde_json::json!({
            "version": "1.0",
            "data": [{
                "id": "s1",
                "source": "mctest",
                "story": "Ann had a cat. The cat was black.",
                "questions": [
                    {"input_text": "What color was it?", "turn_id": 2},
                    {"input_text": "What did Ann have?", "turn_id": 1}
                ],
                "answers": [
                    {"input_text": "a cat", "turn_id": 1, "span_text": "a cat"},
                    {"input_text": "black", "turn_id": 2, "span_text": "black"}
                ],
                "additional_answers": {
                    "1": [{"input_text": "black.", "turn_id": 2}, {"input_text": "cat", "turn_id": 1}],
                    "0": [{"input_text": "A cat", "turn_id": 1}, {"input_text": "Black", "turn_id": 2}]
                }
            }]
        })
        .to_string(),
    )
    .unwrap();
    let out_path = tmp.path().join("coqa.jsonl");
    let (code, out, err) = mh(&["convert", "--format", "coqa", "--input", p(&src), "--output", p(&out_path)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("wrote 1 stories"), "{out}");
    assert_eq!(
        fs::read_to_string(&out_path).unwrap(),
        "{\"id\":\"s1\",\"story\":\"Ann had a cat. The cat was black.\",\"turns\":[\
         {\"q\":\"What did Ann have?\",\"answers\":[\"a cat\",\"A cat\",\"cat\"]},\
         {\"q\":\"What color was it?\",\"answers\":[\"black\",\"Black\",\"black.\"]}]}\n"
    );
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"data\": [{\"id\": \"s2\"}]}").unwrap();
    let (code, _, err) = mh(&["convert", "--format", "coqa", "--input", p(&bad), "--output", p(&out_path)]);
    assert_eq!(code, EXIT_FAILURE, "{err}");
}
