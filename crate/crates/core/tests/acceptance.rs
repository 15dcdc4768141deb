//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test --test acceptance`.

mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRng, TestRunner};

use imagine_harness::backends::mock::{MockBackends, MockFixture};
use imagine_harness::backends::server::MockServer;
use imagine_harness::backends::wire::Route;
use imagine_harness::backends::{BackendSet, Embedder, EmbeddingVector};
use imagine_harness::datamodel::{ExperimentSpec, LabelSet, Task, IEMOCAP_CLAUSE};
use imagine_harness::datasets::Dataset;
use imagine_harness::mapping::{map_to_label, output_process, MappedVia};
use imagine_harness::metrics::{max_over_references, weighted_f1, ConfusionMatrix};
use imagine_harness::par::Execution;
use imagine_harness::prompting::build_er_prompt;
use imagine_harness::runner::{imagine, run_matrix, RunOptions, PREDICTIONS_FILE, REPORT_FILE};
use imagine_harness::segmentation::{partition, snap_to_full_stop, DefaultTokenizer, TokenizedText};
use tempfile::TempDir;

type Check = Result<String, String>;
type NamedCheck = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner_with(config: Config) -> TestRunner {
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn label_set(n: usize) -> LabelSet {
    LabelSet::new((0..n).map(|i| format!("L{i}"))).unwrap()
}

fn metrics_oracle() -> Check {
    let start = Instant::now();
    let mut runner = runner_with(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let inst = common::instance().new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let cm = ConfusionMatrix::from_pairs(&label_set(inst.n_labels), &inst.pairs, Execution::Parallel);
        let s = weighted_f1(&cm).map_err(|e| e.to_string())?;
        let (wf1, acc) = common::oracle_scores(&inst);
        worst = worst.max((s.wf1 - wf1).abs()).max((s.accuracy - acc).abs());
        ensure(worst <= 1e-9, || format!("deviation {worst:e} on {inst:?}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 instances, max deviation {worst:e}, {elapsed:.2?}"))
}

fn coqa_fixtures() -> Check {
    let cases = common::coqa_cases();
    ensure(cases.len() >= 20, || format!("only {} fixtures", cases.len()))?;
    for c in &cases {
        let expected = f64::from(c.f1[0]) / f64::from(c.f1[1]);
        let got = max_over_references(&c.pred, &c.refs);
        ensure((got - expected).abs() < 1e-12, || format!("{}: {got} != {expected}", c.name))?;
    }
    Ok(format!("{} hand-computed fixtures", cases.len()))
}

fn hand_case() -> Check {
    let labels = LabelSet::new(["A", "B"]).unwrap();
    let mut cm = ConfusionMatrix::new(labels);
    for (g, p) in [("A", "A"), ("A", "B"), ("B", "B"), ("B", "B")] {
        cm.add(g, p).map_err(|e| e.to_string())?;
    }
    let s = weighted_f1(&cm).map_err(|e| e.to_string())?;
    ensure((s.wf1 - 11.0 / 15.0).abs() <= 1e-12, || format!("wf1 {}", s.wf1))?;
    ensure(s.accuracy == 0.75, || format!("accuracy {}", s.accuracy))?;
    Ok(format!("wf1 {:.15}, accuracy {}", s.wf1, s.accuracy))
}

fn prompt_goldens() -> Check {
    let goldens = common::prompt_goldens();
    ensure(goldens.label_clause == IEMOCAP_CLAUSE, || "label clause differs".into())?;
    ensure(goldens.prompts.len() == 24, || format!("{} goldens", goldens.prompts.len()))?;
    let labels = LabelSet::iemocap();
    for g in &goldens.prompts {
        let spec = ExperimentSpec::builtin(&g.spec, Task::Er).ok_or_else(|| format!("no spec {}", g.spec))?;
        let got = build_er_prompt(&spec, &g.text, &labels).map_err(|e| e.to_string())?;
        ensure(got == g.prompt, || format!("{} / {:?}: got {got:?}", g.spec, g.text))?;
        let needs_clause = !matches!(g.spec.as_str(), "Gen_Image_Inp_Text_P2" | "Gen_Image_Inp_Text_P3");
        ensure(!needs_clause || got.contains(IEMOCAP_CLAUSE), || format!("{} lacks the clause", g.spec))?;
    }
    Ok("8 directives x 3 utterances byte-identical".into())
}

fn segmentation_properties() -> Check {
    let mut spent = Duration::ZERO;
    let mut runner = runner_with(Config { failure_persistence: None, ..Config::default() });
    let mut snaps = 0;
    for i in 0..200 {
        let text = common::story().new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let start = Instant::now();
        let tok = TokenizedText::new(&text, &DefaultTokenizer, 77);
        let seg = partition("s", &tok, 5, None).map_err(|e| format!("story {i}: {e}"))?;
        let snapped = (1..tok.len()).map(|index| snap_to_full_stop(&tok, index)).collect::<Result<Vec<_>, _>>();
        spent += start.elapsed();
        let snapped = snapped.map_err(|e| e.to_string())?;
        ensure(seg.concat() == text, || format!("story {i}: concatenation differs"))?;
        ensure(seg.segments.len() == 5, || format!("story {i}: {} segments", seg.segments.len()))?;
        let mut prev = 0;
        for s in &seg.segments {
            ensure(s.char_start == prev && s.char_end > s.char_start, || format!("story {i}: offsets not monotone"))?;
            prev = s.char_end;
        }
        ensure(prev == text.chars().count(), || format!("story {i}: partition is short"))?;
        for (index, &got) in (1..tok.len()).zip(&snapped) {
            let want = common::snap_by_scan(&tok, index);
            ensure(got == want, || format!("story {i}, token {index}: snapped to {got}, scan says {want}"))?;
            snaps += 1;
        }
    }
    ensure(spent < Duration::from_secs(5), || format!("took {spent:?}"))?;
    Ok(format!("200 stories, {snaps} snaps checked, {spent:.2?} outside the scan oracle"))
}

fn opts(root: &Path) -> RunOptions {
    RunOptions {
        out_dir: root.join("runs"),
        cache_dir: root.join("cache"),
        run_id: Some("matrix".into()),
        ..RunOptions::default()
    }
}

fn server() -> Result<(Arc<MockBackends>, MockServer, BackendSet), String> {
    let mock = Arc::new(MockBackends::new(MockFixture::bundled()).map_err(|e| e.to_string())?);
    let srv = MockServer::start(mock.clone(), "127.0.0.1:0").map_err(|e| e.to_string())?;
    let set = BackendSet::http(&srv.url()).map_err(|e| e.to_string())?;
    Ok((mock, srv, set))
}

fn snapshot(dir: &Path, specs: &[ExperimentSpec]) -> Result<Vec<Vec<u8>>, String> {
    let mut out = Vec::new();
    for s in specs {
        for f in [PREDICTIONS_FILE, REPORT_FILE] {
            out.push(fs::read(dir.join(&s.name).join(f)).map_err(|e| format!("{}/{f}: {e}", s.name))?);
        }
    }
    Ok(out)
}

fn end_to_end_determinism() -> Check {
    let start = Instant::now();
    let mut files = 0;
    for (name, task) in [("mini-er", Task::Er), ("mini-qa", Task::Qa)] {
        let data = Dataset::load(name, None).map_err(|e| e.to_string())?;
        let specs = ExperimentSpec::matrix(task);
        let mut snaps = Vec::new();
        for _ in 0..2 {
            let tmp = TempDir::new().map_err(|e| e.to_string())?;
            let (_mock, _srv, set) = server()?;
            let out = run_matrix(&specs, &data, &set, &opts(tmp.path())).map_err(|e| e.to_string())?;
            ensure(out.is_finished(), || format!("{name}: {:?}", out.failed))?;
            snaps.push(snapshot(&out.dir, &specs)?);
        }
        ensure(snaps[0] == snaps[1], || format!("{name}: outputs differ between runs"))?;
        files += snaps[0].len();
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{files} files identical across two runs over HTTP, {elapsed:.2?}"))
}

fn cache_idempotence() -> Check {
    let mut detail = Vec::new();
    for (name, task) in [("mini-er", Task::Er), ("mini-qa", Task::Qa)] {
        let data = Dataset::load(name, None).map_err(|e| e.to_string())?;
        let specs = ExperimentSpec::matrix(task);
        let tmp = TempDir::new().map_err(|e| e.to_string())?;
        let (mock, _srv, set) = server()?;
        let o = opts(tmp.path());
        let s = imagine(&specs, &data, &set, &o).map_err(|e| e.to_string())?;
        mock.reset_counters();
        run_matrix(&specs, &data, &set, &o).map_err(|e| e.to_string())?;
        let t2i = mock.calls(Route::T2i);
        ensure(t2i == 0, || format!("{name}: {t2i} t2i calls after imagine"))?;
        detail.push(format!("{name}: {} images cached, 0 t2i calls", s.generated));
    }
    Ok(detail.join("; "))
}

struct Keyed(f64);

impl Embedder for Keyed {
    fn embed_texts(&self, texts: &[String]) -> imagine_harness::Result<Vec<EmbeddingVector>> {
        Ok(texts
            .iter()
            .enumerate()
            .map(|(i, t)| EmbeddingVector::new(common::keyed_vector(t, 12, 3)).scaled(self.0 * (i + 1) as f64))
            .collect())
    }
}

fn mapping_properties() -> Check {
    let mut exact = 0;
    for set in [LabelSet::iemocap(), LabelSet::meld()] {
        for l in set.labels() {
            let r = map_to_label(l, &set, &Keyed(1.0)).map_err(|e| e.to_string())?;
            ensure(r.label == *l && r.via == MappedVia::ExactMatch, || format!("{l} mapped to {}", r.label))?;
            exact += 1;
        }
    }
    let mut runner = runner_with(Config { cases: 256, failure_persistence: None, ..Config::default() });
    runner
        .run(&("[a-z]{3,10} [a-z]{3,10}", 0.01f64..100.0), |(answer, k)| {
            let set = LabelSet::iemocap();
            let a = map_to_label(&answer, &set, &Keyed(1.0)).unwrap();
            let b = map_to_label(&answer, &set, &Keyed(k)).unwrap();
            prop_assert_eq!(a.label, b.label);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let empty = map_to_label("", &LabelSet::iemocap(), &Keyed(1.0)).map_err(|e| e.to_string())?;
    ensure(empty.via == MappedVia::Fallback && empty.label == "Unknown", || format!("{empty:?}"))?;
    Ok(format!("{exact} labels map to themselves, 256 scalings keep the argmax, empty -> fallback"))
}

fn output_processing_cases() -> Check {
    let labels = LabelSet::iemocap();
    let spec = ExperimentSpec::builtin("Gen_Image_Inp_Text_Both", Task::Er).unwrap();
    let prompt = build_er_prompt(&spec, "I'm so sorry.", &labels).map_err(|e| e.to_string())?;
    let a = output_process(&format!("{prompt}Answer: Surprised"), &prompt);
    ensure(a == "Surprised", || format!("got {a:?}"))?;
    let b = output_process(&format!("{prompt}   "), &prompt);
    ensure(b.is_empty(), || format!("got {b:?}"))?;
    Ok("echo + \"Answer: Surprised\" -> \"Surprised\"; echo + blank -> \"\"".into())
}

fn main() {
    let checks: [NamedCheck; 9] = [
        ("metrics oracle", metrics_oracle),
        ("CoQA scoring fixtures", coqa_fixtures),
        ("weighted F1 hand case", hand_case),
        ("prompt goldens", prompt_goldens),
        ("segmentation properties", segmentation_properties),
        ("end-to-end determinism", end_to_end_determinism),
        ("cache idempotence", cache_idempotence),
        ("mapping properties", mapping_properties),
        ("output-processing cases", output_processing_cases),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
