//! Command-line entry point: `convert`, `imagine`, `run`, `score`, `report`
//! and `mock-serve`.
//!
//! Exit codes: 0 success, 1 run-level failure, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backends::mock::{MockBackends, MockFixture};
use crate::backends::server::MockServer;
use crate::backends::BackendSet;
use crate::datamodel::{ExperimentSpec, Task};
use crate::datasets::{self, Dataset, ErFormat};
use crate::imaging::{DemoComposite, DemoConfig};
use crate::metrics::{render_table, ScoreReport};
use crate::par::Execution;
use crate::prompting::TemplateSet;
use crate::runner::{
    self, load_predictions, score_records, HistoryMode, Resumed, RunManifest, RunOptions, MANIFEST_FILE,
    REPORT_FILE,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mh", version, about = "Zero-shot text-to-image augmented evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw MELD, IEMOCAP or CoQA files into the normalized layout.
    Convert(ConvertArgs),
    /// Pre-fill the image cache (and story segmentations) for later runs.
    Imagine(RunArgs),
    /// Execute one spec or the whole experiment matrix.
    Run(RunArgs),
    /// Re-score a predictions file.
    Score(ScoreArgs),
    /// Render results tables from run directories or report files.
    Report(ReportArgs),
    /// Serve the fixture-driven mock backends over HTTP.
    MockServe(MockServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConvertFormat {
    MeldCsv,
    IemocapLines,
    Coqa,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, value_enum)]
    pub format: ConvertFormat,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Label set for ER formats: `iemocap`, `meld` or a JSON file.
    #[arg(long)]
    pub label_set: Option<String>,
    /// Keep only records whose id starts with this prefix.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompositeArg {
    Once,
    Five,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HistoryArg {
    Model,
    Gold,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Run-configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Experiment name (repeatable).
    #[arg(long)]
    pub spec: Vec<String>,
    /// Every configuration applicable to the dataset's task.
    #[arg(long)]
    pub matrix: bool,
    /// Bundled set name (`mini-er`, `mini-qa`) or a normalized JSONL file.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub label_set: Option<String>,
    /// `mock` (in-process), an `http://` base URL, or a backends JSON file.
    #[arg(long)]
    pub backends: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Resume the run (or matrix) with this id under the output directory.
    #[arg(long)]
    pub resume: Option<String>,
    /// Name of the new run directory.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub image_size: Option<u32>,
    /// Template file overriding some or all shipped templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub demo_image: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub demo_composite: Option<CompositeArg>,
    #[arg(long, value_enum)]
    pub history: Option<HistoryArg>,
    /// Record per-item latency (makes predictions files run-dependent).
    #[arg(long)]
    pub latency: bool,
    /// Stop after starting this many records, leaving the run resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Score sequentially instead of on the thread pool.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Dataset holding the gold labels or reference answers.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub label_set: Option<String>,
    /// Name shown in the report; taken from a neighbouring run.json if absent.
    #[arg(long)]
    pub spec: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Er,
    Qa,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Er => Task::Er,
            TaskArg::Qa => Task::Qa,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, matrix directories or report.json files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// Fixture JSON; the bundled fixture when absent.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub addr: String,
}

/// Spec given by name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecRef {
    Name(String),
    Inline(Box<ExperimentSpec>),
}

/// Backends given as `mock`, a URL or file path, or inline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendsRef {
    Named(String),
    Inline(Box<crate::backends::BackendsFile>),
}

/// The declarative run configuration; every field is optional and flags
/// take precedence.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub specs: Vec<SpecRef>,
    #[serde(default)]
    pub matrix: bool,
    pub dataset: Option<String>,
    pub label_set: Option<String>,
    pub backends: Option<BackendsRef>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub image_size: Option<u32>,
    pub templates: Option<PathBuf>,
    pub demo: Option<DemoConfig>,
    pub history: Option<HistoryMode>,
    #[serde(default)]
    pub record_latency: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut io = Io { out, err };
    match dispatch(cli.command, &mut io) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error: usage errors are 2, everything else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) | Error::UnsupportedDirective { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cmd: Command, io: &mut Io) -> Result<i32> {
    match cmd {
        Command::Convert(a) => convert(a, io),
        Command::Imagine(a) => imagine(a, io),
        Command::Run(a) => run_cmd(a, io),
        Command::Score(a) => score(a, io),
        Command::Report(a) => report(a, io),
        Command::MockServe(a) => mock_serve(a, io),
    }
}

fn convert(a: ConvertArgs, io: &mut Io) -> Result<i32> {
    match a.format {
        ConvertFormat::Coqa => {
            let n = datasets::convert_coqa(&a.input, &a.output)?;
            writeln!(io.out, "wrote {n} stories to {}", a.output.display())?;
        }
        f => {
            let format = if f == ConvertFormat::MeldCsv { ErFormat::MeldCsv } else { ErFormat::IemocapLines };
            let default_set = if f == ConvertFormat::MeldCsv { "meld" } else { "iemocap" };
            let labels = datasets::load_label_set(a.label_set.as_deref().unwrap_or(default_set))?;
            let s = datasets::convert_er(&a.input, format, &labels, a.split.as_deref(), &a.output)?;
            writeln!(io.out, "wrote {} records to {}", s.accepted, a.output.display())?;
            if let Some(p) = &s.rejects_path {
                writeln!(io.out, "{} rejected rows listed in {}", s.rejected, p.display())?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// Everything a run or imagine command needs, after merging config and flags.
struct Resolved {
    specs: Vec<ExperimentSpec>,
    dataset: Dataset,
    backends: BackendSet,
    opts: RunOptions,
}

fn unknown_spec(name: &str) -> Error {
    Error::Config(format!(
        "unknown spec `{name}`; expected one of: {} (baselines: {})",
        ExperimentSpec::TABLE_NAMES.join(", "),
        ExperimentSpec::BASELINE_NAMES.join(", ")
    ))
}

fn load_backends(spec: &BackendsRef) -> Result<BackendSet> {
    match spec {
        BackendsRef::Named(s) if s == "mock" => BackendSet::in_process(MockFixture::bundled()),
        BackendsRef::Named(s) if s.starts_with("http://") || s.starts_with("https://") => BackendSet::http(s),
        BackendsRef::Named(s) => BackendSet::from_path(Path::new(s)),
        BackendsRef::Inline(file) => {
            BackendSet::from_file((**file).clone(), std::env::var(crate::backends::TOKEN_ENV).ok())
        }
    }
}

fn resolve(a: RunArgs, need_dataset: bool) -> Result<Resolved> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let backends_ref = match a.backends {
        Some(b) => BackendsRef::Named(b),
        None => cfg.backends.clone().unwrap_or_else(|| BackendsRef::Named("mock".into())),
    };
    let backends = load_backends(&backends_ref)?;

    let mut opts = RunOptions::default();
    if let Some(p) = a.templates.or(cfg.templates.clone()) {
        opts = opts.with_templates(TemplateSet::from_path(&p)?);
    }
    opts.out_dir = a.out_dir.or(cfg.out_dir.clone()).unwrap_or(opts.out_dir);
    opts.cache_dir = a.cache_dir.or(cfg.cache_dir.clone()).unwrap_or(opts.cache_dir);
    opts.parallelism = a.parallelism.or(cfg.parallelism).unwrap_or(opts.parallelism);
    if opts.parallelism == 0 {
        return Err(Error::Config("--parallelism must be at least 1".into()));
    }
    opts.run_id = a.run_id.clone();
    opts.stop_after = a.stop_after;
    if a.sequential {
        opts.exec = Execution::Sequential;
    }
    let s = &mut opts.settings;
    s.run_seed = a.seed.or(cfg.seed).unwrap_or(s.run_seed);
    s.image_size = a.image_size.or(cfg.image_size).unwrap_or(s.image_size);
    if s.image_size == 0 {
        return Err(Error::Config("--image-size must be positive".into()));
    }
    s.record_latency = a.latency || cfg.record_latency;
    if let Some(d) = cfg.demo.clone() {
        s.demo = d;
    }
    if let Some(p) = a.demo_image {
        s.demo.path = Some(p);
    }
    if let Some(c) = a.demo_composite {
        s.demo.composite = match c {
            CompositeArg::Once => DemoComposite::Once,
            CompositeArg::Five => DemoComposite::Five,
        };
    }
    s.history = match a.history {
        Some(HistoryArg::Model) => HistoryMode::Model,
        Some(HistoryArg::Gold) => HistoryMode::Gold,
        None => cfg.history.unwrap_or(s.history),
    };

    let dataset_name = a.dataset.or(cfg.dataset.clone());
    let dataset = match (dataset_name, need_dataset) {
        (Some(d), _) => Dataset::load(&d, a.label_set.as_deref().or(cfg.label_set.as_deref()))?,
        (None, true) => return Err(Error::Config("--dataset is required".into())),
        (None, false) => Dataset::load("mini-er", None)?,
    };
    let task = dataset.task();

    let matrix = a.matrix || cfg.matrix;
    let mut specs = Vec::new();
    let names: Vec<SpecRef> = if a.spec.is_empty() {
        cfg.specs.clone()
    } else {
        a.spec.iter().cloned().map(SpecRef::Name).collect()
    };
    for r in names {
        let spec = match r {
            SpecRef::Name(n) => ExperimentSpec::builtin(&n, task).ok_or_else(|| unknown_spec(&n))?,
            SpecRef::Inline(s) => *s,
        };
        let v = spec.violations();
        if !v.is_empty() {
            return Err(Error::InvalidSpec(v));
        }
        spec.check_task(task)?;
        specs.push(spec);
    }
    if matrix {
        for s in ExperimentSpec::matrix(task) {
            if !specs.iter().any(|x| x.name == s.name) {
                specs.push(s);
            }
        }
    }
    Ok(Resolved {
        specs,
        dataset,
        backends,
        opts,
    })
}

fn imagine(a: RunArgs, io: &mut Io) -> Result<i32> {
    let explicit = a.matrix || !a.spec.is_empty() || a.config.is_some();
    let mut r = resolve(a, true)?;
    if !explicit || r.specs.is_empty() {
        r.specs = ExperimentSpec::matrix(r.dataset.task());
    }
    let s = runner::imagine(&r.specs, &r.dataset, &r.backends, &r.opts)?;
    writeln!(
        io.out,
        "images: {} requested, {} generated, {} already cached, {} failed; {} stories segmented",
        s.requested, s.generated, s.cache_hits, s.failures, s.stories_segmented
    )?;
    Ok(if s.failures > 0 { EXIT_FAILURE } else { EXIT_OK })
}

fn run_cmd(a: RunArgs, io: &mut Io) -> Result<i32> {
    if let Some(id) = a.resume.clone() {
        let r = resolve(a, false)?;
        let dir = r.opts.out_dir.join(&id);
        if !dir.join(MANIFEST_FILE).exists() && !dir.join(runner::MATRIX_FILE).exists() {
            return Err(Error::Config(format!("no run `{id}` under {}", r.opts.out_dir.display())));
        }
        return match runner::resume(&dir, &r.backends, &r.opts)? {
            Resumed::Run(o) => finish_run(&o, io),
            Resumed::Matrix(m) => finish_matrix(&m, io),
        };
    }
    let r = resolve(a, true)?;
    match r.specs.len() {
        0 => Err(Error::Config("give --spec NAME or --matrix".into())),
        1 => {
            let o = runner::run_spec(&r.specs[0], &r.dataset, &r.backends, &r.opts)?;
            finish_run(&o, io)
        }
        _ => {
            let m = runner::run_matrix(&r.specs, &r.dataset, &r.backends, &r.opts)?;
            finish_matrix(&m, io)
        }
    }
}

fn finish_run(o: &runner::RunOutcome, io: &mut Io) -> Result<i32> {
    if let Some(rep) = &o.report {
        write!(io.out, "{}", render_table(std::slice::from_ref(rep)))?;
    }
    if o.is_finished() {
        writeln!(io.out, "run written to {}", o.run_dir.display())?;
    } else {
        writeln!(
            io.out,
            "run {} stopped after {} records; resume with --resume {}",
            o.run_dir.display(),
            o.manifest.counters.samples,
            o.manifest.run_id
        )?;
    }
    Ok(EXIT_OK)
}

fn finish_matrix(m: &runner::MatrixOutcome, io: &mut Io) -> Result<i32> {
    if !m.reports.is_empty() {
        write!(io.out, "{}", render_table(&m.reports))?;
    }
    for (spec, e) in &m.failed {
        writeln!(io.err, "{spec}: {e}")?;
    }
    writeln!(io.out, "matrix written to {}", m.dir.display())?;
    Ok(if m.failed.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

fn score(a: ScoreArgs, io: &mut Io) -> Result<i32> {
    let task: Task = a.task.into();
    let neighbour = a
        .predictions
        .parent()
        .map(|d| d.join(MANIFEST_FILE))
        .filter(|p| p.exists())
        .and_then(|p| RunManifest::load(p.parent().expect("has parent")).ok());
    let dataset = match (&a.dataset, &neighbour) {
        (Some(d), _) => Dataset::load(d, a.label_set.as_deref())?,
        (None, Some(m)) => Dataset::load(runner::dataset_source(&m.dataset), m.dataset.label_set.as_deref())?,
        (None, None) => return Err(Error::Config("--dataset is required".into())),
    };
    if dataset.task() != task {
        return Err(Error::Config(format!(
            "--task {task} does not match dataset `{}` ({})",
            dataset.descriptor.name,
            dataset.task()
        )));
    }
    let name = a
        .spec
        .or_else(|| neighbour.map(|m| m.spec.name))
        .unwrap_or_else(|| "predictions".into());
    let mut records = load_predictions(&a.predictions)?;
    runner::sort_records(task, &mut records);
    let report = score_records(&name, &records, &dataset, Execution::default())?
        .ok_or_else(|| Error::DataIntegrity("the dataset has no gold labels to score against".into()))?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    match &a.out {
        Some(p) => {
            std::fs::write(p, &json)?;
            write!(io.out, "{}", render_table(std::slice::from_ref(&report)))?;
        }
        None => io.out.write_all(&json)?,
    }
    Ok(EXIT_OK)
}

fn read_reports(path: &Path) -> Result<Vec<ScoreReport>> {
    let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let bytes = std::fs::read(&file).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
    Ok(if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    })
}

fn report(a: ReportArgs, io: &mut Io) -> Result<i32> {
    let mut reports = Vec::new();
    for p in &a.inputs {
        reports.extend(read_reports(p)?);
    }
    let table = render_table(&reports);
    match &a.out {
        Some(p) => std::fs::write(p, table.as_bytes())?,
        None => io.out.write_all(table.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn mock_serve(a: MockServeArgs, io: &mut Io) -> Result<i32> {
    let fixture = match &a.fixtures {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => MockFixture::bundled(),
    };
    let server = MockServer::start(Arc::new(MockBackends::new(fixture)?), &a.addr)?;
    writeln!(io.out, "mock backends listening on {}", server.url())?;
    io.out.flush()?;
    server.join()?;
    Ok(EXIT_OK)
}
