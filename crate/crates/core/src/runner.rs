//! Staged pipeline execution with durable, resumable output.
//!
//! A run directory holds `run.json` (the manifest), `predictions.jsonl`
//! (appended and fsynced per record while the run is in progress, rewritten
//! sorted by id when it finishes), `report.json`, `table.txt` and, for QA runs
//! with generated images, `segmentations.jsonl`. A matrix directory holds one
//! run directory per spec plus `matrix.json`, `report.json` and `table.txt`.

use std::collections::hash_map::RandomState;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::hash::BuildHasher;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendClient, BackendDescriptor, BackendSet, Generated, ImageGenerator};
use crate::datamodel::{
    parse_turn_record_id, BackendRole, ExperimentSpec, ImageSource, LabelSet, Modality, PredictionRecord,
    RecordFlag, Sample, SeedPolicy, Story, Task, TextInput,
};
use crate::datasets::{Dataset, DatasetDescriptor, DatasetItems};
use crate::hashing::{item_seed, sha256_hex};
use crate::imaging::{hstack, write_atomic, DemoComposite, DemoConfig, ImageArtifact, ImageCache, ImageRequest};
use crate::mapping::{map_to_label, output_process_with, MappedVia, DEFAULT_ECHO_THRESHOLD};
use crate::metrics::{coqa_overall_f1, render_table, score_er, GoldLabels, ScoreReport};
use crate::par::{Execution, WorkerPool};
use crate::prompting::TemplateSet;
use crate::segmentation::{
    count_tokens, segment_tokenized, DefaultTokenizer, Segmentation, SegmentationRecord, SegmentationStore,
    TokenizedText, DEFAULT_PARTS, DEFAULT_TOKEN_CAP,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "run.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.txt";
pub const SEGMENTATIONS_FILE: &str = "segmentations.jsonl";
pub const MATRIX_FILE: &str = "matrix.json";

/// Origin tag of images generated by [`imagine`].
pub const IMAGINE_ORIGIN: &str = "imagine";

const MAX_LOGGED_ERRORS: usize = 20;

/// Which answers fill the conversation history of later QA turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    /// The model's own earlier answers.
    #[default]
    Model,
    /// The first reference answer of each earlier turn.
    Gold,
}

/// Settings that change what a run produces; stored in the manifest and
/// reused on resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub run_seed: u64,
    pub image_size: u32,
    pub parts: usize,
    pub token_cap: usize,
    pub history: HistoryMode,
    pub echo_threshold: f64,
    pub record_latency: bool,
    pub demo: DemoConfig,
    pub templates_hash: String,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            run_seed: 0,
            image_size: 512,
            parts: DEFAULT_PARTS,
            token_cap: DEFAULT_TOKEN_CAP,
            history: HistoryMode::Model,
            echo_threshold: DEFAULT_ECHO_THRESHOLD,
            record_latency: false,
            demo: DemoConfig::default(),
            templates_hash: templates_hash(&TemplateSet::builtin()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Parent directory of run directories.
    pub out_dir: PathBuf,
    /// Image and segmentation cache.
    pub cache_dir: PathBuf,
    /// Bound on concurrently processed items (and so in-flight requests).
    pub parallelism: usize,
    /// Name of the run directory; derived from spec, dataset and time when
    /// absent.
    pub run_id: Option<String>,
    /// Stop once this many records have been started, leaving the run
    /// unfinished and resumable.
    pub stop_after: Option<usize>,
    pub templates: TemplateSet,
    /// Execution mode of the scoring stage.
    pub exec: Execution,
    pub settings: RunSettings,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            cache_dir: PathBuf::from(".mh-cache"),
            parallelism: 4,
            run_id: None,
            stop_after: None,
            templates: TemplateSet::builtin(),
            exec: Execution::default(),
            settings: RunSettings::default(),
        }
    }
}

impl RunOptions {
    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.settings.templates_hash = templates_hash(&templates);
        self.templates = templates;
        self
    }
}

/// Hash of every template skeleton, so a resumed run uses the same prompts.
pub fn templates_hash(set: &TemplateSet) -> String {
    let mut text = String::new();
    for key in set.keys() {
        let skeleton = set.get(key).map(|t| t.skeleton()).unwrap_or_default();
        text.push_str(&format!("[{key}]\n{skeleton}\n"));
    }
    sha256_hex(text.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Finished,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Skipped,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub samples: usize,
    pub cache_hits: usize,
    pub retries: usize,
    pub fallbacks: usize,
    pub failures: usize,
    pub truncations: usize,
}

/// Counters as derived from a predictions file plus the truncation count.
pub fn derive_counters(records: &[PredictionRecord], truncations: usize) -> Counters {
    let count = |f: RecordFlag| records.iter().filter(|r| r.has(f)).count();
    Counters {
        samples: records.len(),
        cache_hits: count(RecordFlag::CacheHit),
        retries: count(RecordFlag::Retried),
        fallbacks: count(RecordFlag::EmptyExtractionFallback),
        failures: count(RecordFlag::Failed),
        truncations,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task: Task,
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    pub dataset: DatasetDescriptor,
    pub backends: Vec<BackendDescriptor>,
    /// Model ids reported by the backends, per role.
    pub model_ids: BTreeMap<BackendRole, BTreeSet<String>>,
    pub settings: RunSettings,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub stages: IndexMap<String, StageStatus>,
    pub counters: Counters,
    /// The first item failures of the latest session.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<ItemError>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::DataIntegrity(format!("{}: {e}", path.display())))
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&run_dir.join(MANIFEST_FILE), &bytes)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    /// Present once the run has finished and the dataset has gold data.
    pub report: Option<ScoreReport>,
}

impl RunOutcome {
    pub fn is_finished(&self) -> bool {
        self.manifest.status == RunStatus::Finished
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn default_run_id(spec: &ExperimentSpec, dataset: &Dataset) -> String {
    format!(
        "{}_{}_{}",
        spec.name,
        dataset.descriptor.name,
        chrono::Utc::now().format("%Y%m%dT%H%M%S%3f")
    )
}

fn seed_for(policy: SeedPolicy, run_seed: u64, id: &str) -> u64 {
    match policy {
        SeedPolicy::PerItemDeterministic => item_seed(run_seed, id),
        SeedPolicy::Fixed(s) => s,
        SeedPolicy::Random => RandomState::new().hash_one(id),
    }
}

/// Reads a predictions file. A torn final line (from an interrupted write)
/// is ignored; later records replace earlier ones with the same id.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_predictions(&text, &path.display().to_string())
}

fn parse_predictions(text: &str, origin: &str) -> Result<Vec<PredictionRecord>> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut by_id: IndexMap<String, PredictionRecord> = IndexMap::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let last = i + 1 == lines.len() || (i + 2 == lines.len() && lines[i + 1].is_empty());
        match serde_json::from_str::<PredictionRecord>(line) {
            Ok(r) => {
                by_id.insert(r.sample_id.clone(), r);
            }
            Err(_) if last => break,
            Err(e) => return Err(Error::DataIntegrity(format!("{origin} line {}: {e}", i + 1))),
        }
    }
    Ok(by_id.into_values().collect())
}

/// Orders ER records by id and QA records by story id, then turn index.
pub fn sort_records(task: Task, records: &mut [PredictionRecord]) {
    match task {
        Task::Er => records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id)),
        Task::Qa => records.sort_by(|a, b| {
            let ka = parse_turn_record_id(&a.sample_id);
            let kb = parse_turn_record_id(&b.sample_id);
            ka.cmp(&kb).then_with(|| a.sample_id.cmp(&b.sample_id))
        }),
    }
}

fn records_bytes(records: &[PredictionRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Scores a predictions file against a dataset. Pure in its inputs.
pub fn score_records(
    spec_name: &str,
    records: &[PredictionRecord],
    dataset: &Dataset,
    exec: Execution,
) -> Result<Option<ScoreReport>> {
    match &dataset.items {
        DatasetItems::Er { samples, labels } => {
            let gold: GoldLabels = samples
                .iter()
                .filter_map(|s| s.gold_label.clone().map(|g| (s.id.clone(), g)))
                .collect();
            if gold.is_empty() {
                return Ok(None);
            }
            let known: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
            if let Some(r) = records.iter().find(|r| !known.contains(r.sample_id.as_str())) {
                return Err(Error::DataIntegrity(format!("record `{}` matches no sample", r.sample_id)));
            }
            let scored: Vec<PredictionRecord> =
                records.iter().filter(|r| gold.contains_key(&r.sample_id)).cloned().collect();
            score_er(spec_name, &scored, &gold, labels, exec).map(Some)
        }
        DatasetItems::Qa { stories } => coqa_overall_f1(spec_name, records, stories).map(Some),
    }
}

fn write_report(dir: &Path, reports: &[ScoreReport], single: bool) -> Result<()> {
    let mut json = if single {
        serde_json::to_vec_pretty(&reports[0])?
    } else {
        serde_json::to_vec_pretty(reports)?
    };
    json.push(b'\n');
    write_atomic(&dir.join(REPORT_FILE), &json)?;
    write_atomic(&dir.join(TABLE_FILE), render_table(reports).as_bytes())
}

/// One serialized appender for the predictions file, with the failure budget
/// and the optional stop point.
struct Journal {
    file: Mutex<File>,
    started: AtomicUsize,
    limit: Option<usize>,
    failures: AtomicUsize,
    total: usize,
    aborted: AtomicBool,
    errors: Mutex<Vec<ItemError>>,
}

impl Journal {
    fn open(path: &Path, limit: Option<usize>, total: usize) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
            started: AtomicUsize::new(0),
            limit,
            failures: AtomicUsize::new(0),
            total,
            aborted: AtomicBool::new(false),
            errors: Mutex::new(Vec::new()),
        })
    }

    /// Reserves one record; false once the run must stop.
    fn try_start(&self) -> bool {
        if self.aborted.load(Ordering::SeqCst) {
            return false;
        }
        match self.limit {
            Some(limit) => self.started.fetch_add(1, Ordering::SeqCst) < limit,
            None => true,
        }
    }

    fn append(&self, rec: &PredictionRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        {
            let mut f = self.file.lock().expect("journal lock");
            f.write_all(&line)?;
            f.flush()?;
            f.sync_data()?;
        }
        if rec.has(RecordFlag::Failed) {
            let failed = self.failures.fetch_add(1, Ordering::SeqCst) + 1;
            if failed * 10 > self.total {
                self.aborted.store(true, Ordering::SeqCst);
            }
        }
        Ok(())
    }

    fn note_error(&self, id: &str, message: &str) {
        let mut errors = self.errors.lock().expect("error log");
        if errors.len() < MAX_LOGGED_ERRORS {
            errors.push(ItemError {
                id: id.to_string(),
                message: message.to_string(),
            });
        }
    }
}

/// Per-role reported model ids.
#[derive(Default)]
struct ModelLog(Mutex<BTreeMap<BackendRole, BTreeSet<String>>>);

impl ModelLog {
    fn note(&self, role: BackendRole, id: &str) {
        let mut m = self.0.lock().expect("model log");
        m.entry(role).or_default().insert(id.to_string());
    }

    fn into_inner(self) -> BTreeMap<BackendRole, BTreeSet<String>> {
        self.0.into_inner().expect("model log")
    }
}

/// Image generator that records the model id each generation reports.
struct Reporting<'a> {
    inner: &'a BackendClient,
    log: &'a ModelLog,
}

impl ImageGenerator for Reporting<'_> {
    fn model_id(&self) -> &str {
        self.inner.descriptor().model_id.as_str()
    }

    fn generate_image(&self, prompt: &str, seed: u64, width: u32, height: u32) -> Result<Generated<ImageArtifact>> {
        let g = self.inner.t2i_generate(prompt, seed, width, height)?;
        self.log.note(BackendRole::T2i, &g.model_id);
        Ok(g)
    }
}

/// Backends a spec needs for a task, resolved once.
struct Clients<'a> {
    t2i: Option<&'a BackendClient>,
    mllm: Option<&'a BackendClient>,
    llm: Option<&'a BackendClient>,
    embed: Option<&'a BackendClient>,
    segment: Option<&'a BackendClient>,
}

impl<'a> Clients<'a> {
    fn resolve(spec: &ExperimentSpec, task: Task, set: &'a BackendSet) -> Result<Self> {
        let get = |role, needed: bool| -> Result<Option<&'a BackendClient>> {
            if needed {
                set.for_role(spec, role).map(Some)
            } else {
                Ok(None)
            }
        };
        let generated = spec.image_source == ImageSource::Generated;
        Ok(Self {
            t2i: get(BackendRole::T2i, generated)?,
            mllm: get(BackendRole::Mllm, spec.modality == Modality::Multimodal)?,
            llm: get(BackendRole::Llm, spec.modality == Modality::Unimodal)?,
            embed: get(BackendRole::Embed, task == Task::Er)?,
            segment: get(BackendRole::Segment, generated && task == Task::Qa)?,
        })
    }
}

/// Image request for one ER sample.
fn er_image_request(spec: &ExperimentSpec, settings: &RunSettings, sample: &Sample) -> ImageRequest {
    ImageRequest {
        prompt: sample.text.clone(),
        seed: seed_for(spec.seed_policy, settings.run_seed, &sample.id),
        width: settings.image_size,
        height: settings.image_size,
    }
}

/// Loads or computes (and stores) the segmentation of a story.
fn story_segmentation(
    story: &Story,
    proposer: &BackendClient,
    store: &SegmentationStore,
    settings: &RunSettings,
) -> Result<Segmentation> {
    let key = SegmentationStore::key(&proposer.descriptor().model_id, story, settings.parts, settings.token_cap);
    if let Some(seg) = store.get(&key, story) {
        return Ok(seg);
    }
    let tok = TokenizedText::new(&story.text, &DefaultTokenizer, settings.token_cap);
    let seg = segment_tokenized(&story.id, &tok, settings.parts, proposer)?;
    store.put(&key, &seg)?;
    Ok(seg)
}

fn segment_requests(spec: &ExperimentSpec, settings: &RunSettings, story: &Story, seg: &Segmentation) -> Vec<ImageRequest> {
    let seed = seed_for(spec.seed_policy, settings.run_seed, &story.id);
    seg.segments
        .iter()
        .map(|s| ImageRequest {
            prompt: s.text.trim().to_string(),
            seed,
            width: settings.image_size,
            height: settings.image_size,
        })
        .collect()
}

fn over_cap_segments(seg: &Segmentation, cap: usize) -> usize {
    seg.segments.iter().filter(|s| count_tokens(&s.text).len() > cap).count()
}

/// Errors that fail one item (or one story) instead of the run.
fn is_item_failure(e: &Error) -> bool {
    e.is_item_failure() || matches!(e, Error::DegenerateStory { .. })
}

fn failed_record(id: &str, image_keys: Vec<String>) -> PredictionRecord {
    PredictionRecord {
        sample_id: id.to_string(),
        raw_output: String::new(),
        extracted: String::new(),
        prediction: String::new(),
        scores: IndexMap::new(),
        image_keys,
        latency_ms: 0,
        flags: BTreeSet::from([RecordFlag::Failed]),
    }
}

/// Images handed to the model for one item, plus what fetching them set.
struct ItemImages {
    images: Vec<ImageArtifact>,
    keys: Vec<String>,
    flags: BTreeSet<RecordFlag>,
}

struct Ctx<'a> {
    run_id: &'a str,
    spec: &'a ExperimentSpec,
    settings: &'a RunSettings,
    templates: &'a TemplateSet,
    clients: Clients<'a>,
    cache: &'a ImageCache,
    segments: SegmentationStore,
    demo: Option<ImageArtifact>,
    models: ModelLog,
    journal: &'a Journal,
}

impl Ctx<'_> {
    fn fetch(&self, req: &ImageRequest) -> Result<(ImageArtifact, BTreeSet<RecordFlag>)> {
        let t2i = self.clients.t2i.expect("t2i resolved for generated images");
        let gen = Reporting {
            inner: t2i,
            log: &self.models,
        };
        let f = self.cache.fetch_or_generate_as(req, &gen, Some(self.run_id))?;
        let mut flags = BTreeSet::new();
        if f.cache_hit && f.origin.as_deref() != Some(self.run_id) {
            flags.insert(RecordFlag::CacheHit);
        }
        if f.retried {
            flags.insert(RecordFlag::Retried);
        }
        Ok((f.image, flags))
    }

    fn demo_images(&self, copies: usize) -> Result<ItemImages> {
        let demo = self.demo.clone().expect("demo image loaded");
        let keys = vec![demo.cache_key.clone(); copies];
        let image = if copies > 1 {
            hstack(&vec![demo; copies])?
        } else {
            demo
        };
        Ok(ItemImages {
            images: vec![image],
            keys,
            flags: BTreeSet::new(),
        })
    }

    fn no_images() -> ItemImages {
        ItemImages {
            images: Vec::new(),
            keys: Vec::new(),
            flags: BTreeSet::new(),
        }
    }

    fn generate(&self, prompt: &str, images: &[ImageArtifact]) -> Result<(Generated<String>, u64)> {
        let start = Instant::now();
        let (g, role) = match self.spec.modality {
            Modality::Multimodal => (
                self.clients.mllm.expect("mllm resolved").mm_generate(prompt, images, &self.spec.decode)?,
                BackendRole::Mllm,
            ),
            Modality::Unimodal => (
                self.clients.llm.expect("llm resolved").text_generate(prompt, &self.spec.decode)?,
                BackendRole::Llm,
            ),
        };
        self.models.note(role, &g.model_id);
        let ms = if self.settings.record_latency {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok((g, ms))
    }

    fn extract(&self, raw: &str, prompt: &str) -> String {
        if self.spec.output_processing {
            output_process_with(raw, prompt, self.settings.echo_threshold)
        } else {
            raw.trim().to_string()
        }
    }

    fn er_images(&self, sample: &Sample) -> Result<ItemImages> {
        match self.spec.image_source {
            ImageSource::Generated => {
                let (image, flags) = self.fetch(&er_image_request(self.spec, self.settings, sample))?;
                Ok(ItemImages {
                    keys: vec![image.cache_key.clone()],
                    images: vec![image],
                    flags,
                })
            }
            ImageSource::Demo => self.demo_images(1),
            ImageSource::None => Ok(Self::no_images()),
        }
    }

    fn er_item(&self, sample: &Sample, labels: &LabelSet) -> Result<PredictionRecord> {
        let imgs = self.er_images(sample)?;
        let prompt = self.templates.build_er_prompt(self.spec, &sample.text, labels)?;
        let (g, latency_ms) = self.generate(&prompt, &imgs.images)?;
        let mut flags = imgs.flags;
        if g.retried {
            flags.insert(RecordFlag::Retried);
        }
        let extracted = self.extract(&g.value, &prompt);
        let embed = self.clients.embed.expect("embedder resolved");
        let mapped = map_to_label(&extracted, labels, embed)?;
        match mapped.via {
            MappedVia::Fallback => {
                flags.insert(RecordFlag::EmptyExtractionFallback);
            }
            MappedVia::Embedding => self.models.note(BackendRole::Embed, &embed.descriptor().model_id),
            MappedVia::ExactMatch => {}
        }
        Ok(PredictionRecord {
            sample_id: sample.id.clone(),
            raw_output: g.value,
            extracted,
            prediction: mapped.label,
            scores: mapped.scores,
            image_keys: imgs.keys,
            latency_ms,
            flags,
        })
    }

    fn run_er_sample(&self, sample: &Sample, labels: &LabelSet) -> Result<()> {
        if !self.journal.try_start() {
            return Ok(());
        }
        let rec = match self.er_item(sample, labels) {
            Ok(r) => r,
            Err(e) if is_item_failure(&e) => {
                self.journal.note_error(&sample.id, &e.to_string());
                failed_record(&sample.id, Vec::new())
            }
            Err(e) => return Err(e),
        };
        self.journal.append(&rec)
    }

    fn story_images(&self, story: &Story) -> Result<ItemImages> {
        match self.spec.image_source {
            ImageSource::Generated => {
                let proposer = self.clients.segment.expect("segment backend resolved");
                let seg = story_segmentation(story, proposer, &self.segments, self.settings)?;
                self.models.note(BackendRole::Segment, &proposer.descriptor().model_id);
                let mut images = Vec::new();
                let mut flags = BTreeSet::new();
                let mut hits = 0;
                for req in segment_requests(self.spec, self.settings, story, &seg) {
                    let (img, f) = self.fetch(&req)?;
                    hits += usize::from(f.contains(&RecordFlag::CacheHit));
                    if f.contains(&RecordFlag::Retried) {
                        flags.insert(RecordFlag::Retried);
                    }
                    images.push(img);
                }
                if hits == images.len() {
                    flags.insert(RecordFlag::CacheHit);
                }
                let keys = images.iter().map(|i| i.cache_key.clone()).collect();
                Ok(ItemImages {
                    images: vec![hstack(&images)?],
                    keys,
                    flags,
                })
            }
            ImageSource::Demo => self.demo_images(match self.settings.demo.composite {
                DemoComposite::Once => 1,
                DemoComposite::Five => self.settings.parts,
            }),
            ImageSource::None => Ok(Self::no_images()),
        }
    }

    fn qa_turn(&self, story: &Story, index: usize, history: &[(String, String)], imgs: &ItemImages) -> Result<PredictionRecord> {
        let turn = &story.turns[index];
        let text = match self.spec.text_input {
            TextInput::Input => Some(story.text.as_str()),
            TextInput::None => None,
        };
        let prompt = self
            .templates
            .build_qa_prompt(&turn.question, history, self.spec.directive, text)?;
        let (g, latency_ms) = self.generate(&prompt, &imgs.images)?;
        let mut flags = imgs.flags.clone();
        if g.retried {
            flags.insert(RecordFlag::Retried);
        }
        let extracted = self.extract(&g.value, &prompt);
        Ok(PredictionRecord {
            sample_id: story.turn_record_id(index),
            raw_output: g.value,
            prediction: extracted.clone(),
            extracted,
            scores: IndexMap::new(),
            image_keys: imgs.keys.clone(),
            latency_ms,
            flags,
        })
    }

    /// Runs the pending turns of one story in order. `done` holds the
    /// records of turns finished in an earlier session.
    fn run_story(&self, story: &Story, done: &BTreeMap<usize, String>) -> Result<()> {
        let pending: Vec<usize> = (0..story.turns.len()).filter(|i| !done.contains_key(i)).collect();
        if pending.is_empty() {
            return Ok(());
        }
        let mut imgs: Option<std::result::Result<ItemImages, String>> = None;
        let mut history: Vec<(String, String)> = Vec::with_capacity(story.turns.len());
        for (index, turn) in story.turns.iter().enumerate() {
            let answer = match done.get(&index) {
                Some(a) => a.clone(),
                None => {
                    if !self.journal.try_start() {
                        return Ok(());
                    }
                    if imgs.is_none() {
                        imgs = Some(match self.story_images(story) {
                            Ok(i) => Ok(i),
                            Err(e) if is_item_failure(&e) => Err(e.to_string()),
                            Err(e) => return Err(e),
                        });
                    }
                    let id = story.turn_record_id(index);
                    let rec = match imgs.as_ref().expect("set above") {
                        Ok(images) => match self.qa_turn(story, index, &history, images) {
                            Ok(r) => r,
                            Err(e) if is_item_failure(&e) => {
                                self.journal.note_error(&id, &e.to_string());
                                failed_record(&id, Vec::new())
                            }
                            Err(e) => return Err(e),
                        },
                        Err(msg) => {
                            self.journal.note_error(&id, msg);
                            failed_record(&id, Vec::new())
                        }
                    };
                    self.journal.append(&rec)?;
                    rec.prediction
                }
            };
            let shown = match self.settings.history {
                HistoryMode::Model => answer,
                HistoryMode::Gold => turn.references[0].clone(),
            };
            history.push((turn.question.clone(), shown));
        }
        Ok(())
    }
}

fn stage_map(spec: &ExperimentSpec, task: Task, status: StageStatus) -> IndexMap<String, StageStatus> {
    let images = if spec.image_source == ImageSource::None {
        StageStatus::Skipped
    } else {
        status
    };
    let mapping = if task == Task::Er { status } else { StageStatus::Skipped };
    IndexMap::from([
        ("images".to_string(), images),
        ("inference".to_string(), status),
        ("mapping".to_string(), mapping),
        ("scoring".to_string(), StageStatus::Pending),
    ])
}

/// Runs one spec over a dataset, resuming the run directory if it exists.
pub fn run_spec(spec: &ExperimentSpec, dataset: &Dataset, backends: &BackendSet, opts: &RunOptions) -> Result<RunOutcome> {
    match dataset.task() {
        Task::Er => run_er(spec, dataset, backends, opts),
        Task::Qa => run_qa(spec, dataset, backends, opts),
    }
}

pub fn run_er(spec: &ExperimentSpec, dataset: &Dataset, backends: &BackendSet, opts: &RunOptions) -> Result<RunOutcome> {
    execute(spec, dataset, backends, opts, Task::Er)
}

pub fn run_qa(spec: &ExperimentSpec, dataset: &Dataset, backends: &BackendSet, opts: &RunOptions) -> Result<RunOutcome> {
    execute(spec, dataset, backends, opts, Task::Qa)
}

fn check_inputs(spec: &ExperimentSpec, dataset: &Dataset, task: Task) -> Result<()> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::InvalidSpec(v));
    }
    if dataset.task() != task {
        return Err(Error::Precondition(format!(
            "dataset `{}` is a {} dataset, not {task}",
            dataset.descriptor.name,
            dataset.task()
        )));
    }
    spec.check_task(task)
}

fn execute(spec: &ExperimentSpec, dataset: &Dataset, backends: &BackendSet, opts: &RunOptions, task: Task) -> Result<RunOutcome> {
    check_inputs(spec, dataset, task)?;
    let run_id = opts.run_id.clone().unwrap_or_else(|| default_run_id(spec, dataset));
    let run_dir = opts.out_dir.join(&run_id);
    let pred_path = run_dir.join(PREDICTIONS_FILE);

    let (mut manifest, prior) = if run_dir.join(MANIFEST_FILE).exists() {
        let m = RunManifest::load(&run_dir)?;
        if m.spec_hash != spec.content_hash() {
            return Err(Error::ResumeRefused(format!("run `{run_id}` was started with a different spec")));
        }
        if m.dataset.content_hash != dataset.descriptor.content_hash {
            return Err(Error::ResumeRefused(format!("run `{run_id}` was started on different dataset contents")));
        }
        if m.settings.templates_hash != templates_hash(&opts.templates) {
            return Err(Error::ResumeRefused(format!("run `{run_id}` was started with different templates")));
        }
        if m.status == RunStatus::Finished {
            let report = read_report(&run_dir)?;
            return Ok(RunOutcome {
                run_dir,
                manifest: m,
                report,
            });
        }
        let prior = if pred_path.exists() { load_predictions(&pred_path)? } else { Vec::new() };
        (m, prior)
    } else {
        fs::create_dir_all(&run_dir)?;
        let m = RunManifest {
            run_id: run_id.clone(),
            task,
            spec: spec.clone(),
            spec_hash: spec.content_hash(),
            dataset: dataset.descriptor.clone(),
            backends: backends.descriptors(),
            model_ids: BTreeMap::new(),
            settings: opts.settings.clone(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            stages: stage_map(spec, task, StageStatus::Running),
            counters: Counters::default(),
            errors: Vec::new(),
        };
        (m, Vec::new())
    };
    let settings = manifest.settings.clone();

    // Keep the successful records of earlier sessions; failed items are retried.
    let kept: Vec<PredictionRecord> = prior.into_iter().filter(|r| !r.has(RecordFlag::Failed)).collect();
    let mut compact = kept.clone();
    sort_records(task, &mut compact);
    write_atomic(&pred_path, &records_bytes(&compact)?)?;
    manifest.status = RunStatus::Running;
    manifest.stages = stage_map(spec, task, StageStatus::Running);
    manifest.counters = derive_counters(&compact, 0);
    manifest.save(&run_dir)?;

    let cache = ImageCache::new(&opts.cache_dir)?;
    let demo = match spec.image_source {
        ImageSource::Demo => Some(settings.demo.load(settings.image_size, settings.image_size)?),
        _ => None,
    };
    let total = dataset.len();
    let journal = Journal::open(&pred_path, opts.stop_after, total)?;
    let ctx = Ctx {
        run_id: &run_id,
        spec,
        settings: &settings,
        templates: &opts.templates,
        clients: Clients::resolve(spec, task, backends)?,
        cache: &cache,
        segments: SegmentationStore::new(&opts.cache_dir),
        demo,
        models: ModelLog::default(),
        journal: &journal,
    };
    let pool = WorkerPool::new(opts.parallelism)?;
    let done_ids: BTreeSet<&str> = kept.iter().map(|r| r.sample_id.as_str()).collect();

    let results: Vec<Result<()>> = match &dataset.items {
        DatasetItems::Er { samples, labels } => {
            let pending: Vec<&Sample> = samples.iter().filter(|s| !done_ids.contains(s.id.as_str())).collect();
            pool.map(&pending, |s| ctx.run_er_sample(s, labels))
        }
        DatasetItems::Qa { stories } => {
            let mut done: HashMap<&str, BTreeMap<usize, String>> = HashMap::new();
            for r in &kept {
                if let Some((story, turn)) = parse_turn_record_id(&r.sample_id) {
                    done.entry(story).or_default().insert(turn, r.prediction.clone());
                }
            }
            let empty = BTreeMap::new();
            let work: Vec<(&Story, &BTreeMap<usize, String>)> = stories
                .iter()
                .map(|s| (s, done.get(s.id.as_str()).unwrap_or(&empty)))
                .filter(|(s, d)| d.len() < s.turns.len())
                .collect();
            pool.map(&work, |(s, d)| ctx.run_story(s, d))
        }
    };
    let Ctx { models, .. } = ctx;
    for (role, ids) in models.into_inner() {
        manifest.model_ids.entry(role).or_default().extend(ids);
    }
    manifest.errors = journal.errors.lock().expect("error log").clone();
    let aborted = journal.aborted.load(Ordering::SeqCst);
    let failures = journal.failures.load(Ordering::SeqCst);
    drop(journal);

    let first_err = results.into_iter().find_map(|r| r.err());
    let mut records = load_predictions(&pred_path)?;
    sort_records(task, &mut records);
    manifest.counters = derive_counters(&records, 0);
    if let Some(e) = first_err {
        manifest.save(&run_dir)?;
        return Err(e);
    }
    if aborted {
        manifest.status = RunStatus::Aborted;
        manifest.save(&run_dir)?;
        return Err(Error::RunAborted {
            run_id,
            failed: failures,
            total,
        });
    }
    if records.len() < total {
        manifest.save(&run_dir)?;
        return Ok(RunOutcome {
            run_dir,
            manifest,
            report: None,
        });
    }

    // All items are recorded: finalize.
    write_atomic(&pred_path, &records_bytes(&records)?)?;
    let truncations = match &dataset.items {
        DatasetItems::Er { samples, .. } if spec.image_source == ImageSource::Generated => samples
            .iter()
            .filter(|s| count_tokens(&s.text).len() > settings.token_cap)
            .count(),
        DatasetItems::Er { .. } => 0,
        DatasetItems::Qa { stories } if spec.image_source == ImageSource::Generated => {
            let proposer = backends.for_role(spec, BackendRole::Segment)?;
            let store = SegmentationStore::new(&opts.cache_dir);
            let mut lines: Vec<SegmentationRecord> = Vec::new();
            let mut over = 0;
            for story in stories {
                let key = SegmentationStore::key(&proposer.descriptor().model_id, story, settings.parts, settings.token_cap);
                if let Some(seg) = store.get(&key, story) {
                    over += over_cap_segments(&seg, settings.token_cap);
                    lines.push(seg.record());
                }
            }
            let mut bytes = Vec::new();
            for l in &lines {
                serde_json::to_writer(&mut bytes, l)?;
                bytes.push(b'\n');
            }
            write_atomic(&run_dir.join(SEGMENTATIONS_FILE), &bytes)?;
            over
        }
        DatasetItems::Qa { .. } => 0,
    };
    manifest.counters = derive_counters(&records, truncations);
    let report = score_records(&spec.name, &records, dataset, opts.exec)?;
    if let Some(r) = &report {
        write_report(&run_dir, std::slice::from_ref(r), true)?;
    }
    manifest.stages = stage_map(spec, task, StageStatus::Done);
    manifest.stages.insert(
        "scoring".into(),
        if report.is_some() { StageStatus::Done } else { StageStatus::Skipped },
    );
    manifest.status = RunStatus::Finished;
    manifest.finished_at = Some(now());
    manifest.save(&run_dir)?;
    Ok(RunOutcome {
        run_dir,
        manifest,
        report,
    })
}

fn read_report(run_dir: &Path) -> Result<Option<ScoreReport>> {
    let path = run_dir.join(REPORT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path)?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

/// Argument that reloads the dataset a manifest was run on.
pub fn dataset_source(d: &DatasetDescriptor) -> &str {
    d.path.strip_prefix("builtin:").unwrap_or(&d.path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub matrix_id: String,
    pub task: Task,
    pub dataset: DatasetDescriptor,
    pub specs: Vec<ExperimentSpec>,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    /// Specs whose run failed, with the error.
    pub failed: Vec<(String, String)>,
    pub reports: Vec<ScoreReport>,
}

impl MatrixOutcome {
    pub fn is_finished(&self) -> bool {
        self.failed.is_empty() && self.runs.iter().all(RunOutcome::is_finished)
    }
}

/// Runs several specs over one dataset into `out_dir/<matrix id>/<spec>`.
pub fn run_matrix(specs: &[ExperimentSpec], dataset: &Dataset, backends: &BackendSet, opts: &RunOptions) -> Result<MatrixOutcome> {
    let matrix_id = opts.run_id.clone().unwrap_or_else(|| {
        format!(
            "matrix_{}_{}",
            dataset.descriptor.name,
            chrono::Utc::now().format("%Y%m%dT%H%M%S%3f")
        )
    });
    let dir = opts.out_dir.join(&matrix_id);
    fs::create_dir_all(&dir)?;
    let manifest_path = dir.join(MATRIX_FILE);
    let manifest = MatrixManifest {
        matrix_id: matrix_id.clone(),
        task: dataset.task(),
        dataset: dataset.descriptor.clone(),
        specs: specs.to_vec(),
    };
    if manifest_path.exists() {
        let old: MatrixManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if old.specs != manifest.specs || old.dataset.content_hash != manifest.dataset.content_hash {
            return Err(Error::ResumeRefused(format!(
                "matrix `{matrix_id}` was started with different specs or data"
            )));
        }
    } else {
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&manifest_path, &bytes)?;
    }
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for spec in specs {
        let sub = RunOptions {
            out_dir: dir.clone(),
            run_id: Some(spec.name.clone()),
            ..opts.clone()
        };
        match run_spec(spec, dataset, backends, &sub) {
            Ok(o) => runs.push(o),
            Err(e @ (Error::RunAborted { .. } | Error::ResumeRefused(_))) => failed.push((spec.name.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let reports: Vec<ScoreReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
    if !reports.is_empty() && runs.iter().all(RunOutcome::is_finished) && failed.is_empty() {
        write_report(&dir, &reports, false)?;
    }
    Ok(MatrixOutcome {
        dir,
        runs,
        failed,
        reports,
    })
}

/// What resuming a directory produced.
#[derive(Clone, Debug)]
pub enum Resumed {
    Run(Box<RunOutcome>),
    Matrix(MatrixOutcome),
}

/// Resumes the run or matrix stored in `dir` with its recorded spec, dataset
/// and settings.
pub fn resume(dir: &Path, backends: &BackendSet, opts: &RunOptions) -> Result<Resumed> {
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad run directory {}", dir.display())))?
        .to_string();
    if dir.join(MATRIX_FILE).exists() {
        let m: MatrixManifest = serde_json::from_slice(&fs::read(dir.join(MATRIX_FILE))?)?;
        let dataset = Dataset::load(dataset_source(&m.dataset), m.dataset.label_set.as_deref())?;
        let sub = RunOptions {
            out_dir: parent,
            run_id: Some(id),
            ..opts.clone()
        };
        return run_matrix(&m.specs, &dataset, backends, &sub).map(Resumed::Matrix);
    }
    let m = RunManifest::load(dir)?;
    let dataset = Dataset::load(dataset_source(&m.dataset), m.dataset.label_set.as_deref())?;
    let sub = RunOptions {
        out_dir: parent,
        run_id: Some(id),
        settings: m.settings.clone(),
        ..opts.clone()
    };
    run_spec(&m.spec, &dataset, backends, &sub).map(|o| Resumed::Run(Box::new(o)))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagineSummary {
    /// Distinct image requests.
    pub requested: usize,
    pub generated: usize,
    pub cache_hits: usize,
    pub failures: usize,
    /// Distinct stories with a segmentation.
    pub stories_segmented: usize,
}

/// Fills the image (and segmentation) cache for every spec that generates
/// images, so later runs make no t2i calls.
pub fn imagine(specs: &[ExperimentSpec], dataset: &Dataset, backends: &BackendSet, opts: &RunOptions) -> Result<ImagineSummary> {
    let settings = &opts.settings;
    let cache = ImageCache::new(&opts.cache_dir)?;
    let store = SegmentationStore::new(&opts.cache_dir);
    let pool = WorkerPool::new(opts.parallelism)?;
    let mut summary = ImagineSummary::default();
    let mut seen = BTreeSet::new();
    let mut segmented: BTreeSet<&str> = BTreeSet::new();
    let mut jobs: Vec<(&BackendClient, ImageRequest)> = Vec::new();
    for spec in specs.iter().filter(|s| s.image_source == ImageSource::Generated) {
        check_inputs(spec, dataset, dataset.task())?;
        let t2i = backends.for_role(spec, BackendRole::T2i)?;
        let mut push = |req: ImageRequest| {
            let key = crate::imaging::cache_key(&t2i.descriptor().model_id, &req.prompt, req.seed, req.width, req.height);
            if seen.insert(key) {
                jobs.push((t2i, req));
            }
        };
        match &dataset.items {
            DatasetItems::Er { samples, .. } => {
                for s in samples {
                    push(er_image_request(spec, settings, s));
                }
            }
            DatasetItems::Qa { stories } => {
                let proposer = backends.for_role(spec, BackendRole::Segment)?;
                let segs = pool.map(stories, |s| story_segmentation(s, proposer, &store, settings));
                for (story, seg) in stories.iter().zip(segs) {
                    match seg {
                        Ok(seg) => {
                            segmented.insert(&story.id);
                            for req in segment_requests(spec, settings, story, &seg) {
                                push(req);
                            }
                        }
                        Err(e) if is_item_failure(&e) => summary.failures += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    summary.stories_segmented = segmented.len();
    summary.requested = jobs.len();
    let results = pool.map(&jobs, |(t2i, req)| cache.fetch_or_generate_as(req, *t2i, Some(IMAGINE_ORIGIN)));
    for r in results {
        match r {
            Ok(f) if f.cache_hit => summary.cache_hits += 1,
            Ok(_) => summary.generated += 1,
            Err(e) if is_item_failure(&e) => summary.failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}
