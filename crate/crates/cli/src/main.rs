mod config;
mod records;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use slrc_core::artifact::{self, ArtifactError, Bundle, RunContext};
use slrc_core::backend::{Backend, BackendError, CompletionSource, ResponseCache};
use slrc_core::canonical;
use slrc_core::compiler::{self, CompileError, SplitReport, Strategy};
use slrc_core::dataset::{parse_dataset, split_dataset, DatasetError};
use slrc_core::metrics::{Objective, ScoreFlag};
use slrc_core::screening::{screen_batch, Resolution};
use slrc_core::taskspec::{load_task_file, TaskFile, TaskSpecError};

use config::{BackendChoice, Effective, FileConfig, Overrides};

/// Exit 0 on success, 1 on findings or a failed check, 2 on I/O or
/// configuration errors.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
        }
    }
}

impl From<TaskSpecError> for CliError {
    fn from(e: TaskSpecError) -> Self {
        match e {
            TaskSpecError::Io { .. } => CliError::Io(e.to_string()),
            TaskSpecError::Parse { .. } => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            DatasetError::InvalidFractions(_) | DatasetError::EmptyValSplit => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Io(_) => CliError::Io(e.to_string()),
            BackendError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Config(_) => CliError::Config(e.to_string()),
            CompileError::Dataset(d) => d.into(),
            CompileError::Backend(b) => b.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Io { .. } => CliError::Io(e.to_string()),
            ArtifactError::RefusesOverwrite(_) => CliError::Config(e.to_string()),
            ArtifactError::Backend(b) => b.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<canonical::CanonicalError> for CliError {
    fn from(e: canonical::CanonicalError) -> Self {
        CliError::Failed(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "slrc",
    version,
    about = "Compile, verify and run abstract-screening prompt programs"
)]
struct Cli {
    /// YAML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a task file and gold dataset.
    Validate {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Search for the best program and write a bundle.
    Compile(CompileArgs),
    /// Screen new records with a bundle.
    Screen {
        #[arg(long)]
        bundle: PathBuf,
        /// JSONL of {id, inputs} or CSV with declared field columns.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Score a bundle on a labelled dataset.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the full report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Check a bundle's digests and internal consistency.
    Verify { bundle: PathBuf },
    /// Recompute a bundle's metrics from a cache or backend.
    Replay {
        bundle: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        cache: Option<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Args, Debug)]
struct CompileArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// `scripted:<path>`, `http` or `http:<base url>`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    max_exemplars: Option<usize>,
    #[arg(long)]
    search_seed: Option<u64>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces the configured instruction list; repeatable.
    #[arg(long = "instruction")]
    instructions: Vec<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SourceArgs {
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    cache: Option<String>,
    /// Proceed with a bundle that fails verification.
    #[arg(long)]
    no_verify: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "random_search" => Ok(Strategy::RandomSearch),
        "greedy_coordinate" => Ok(Strategy::GreedyCoordinate),
        _ => Err("expected random_search or greedy_coordinate".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(FileConfig, PathBuf), CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok((FileConfig::default(), PathBuf::new())),
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let (file, base) = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Validate { task, dataset } => cmd_validate(file, &base, task, dataset),
        Command::Compile(args) => cmd_compile(file, base, args),
        Command::Screen {
            bundle,
            input,
            out,
            source,
        } => cmd_screen(&file, &base, &bundle, &input, &out, &source),
        Command::Eval {
            bundle,
            dataset,
            out,
            source,
        } => cmd_eval(&file, &base, &bundle, &dataset, out.as_deref(), &source),
        Command::Verify { bundle } => cmd_verify(&bundle),
        Command::Replay {
            bundle,
            backend,
            cache,
            workers,
        } => cmd_replay(&file, &base, &bundle, backend, cache, workers),
    }
}

fn cmd_validate(file: FileConfig, base: &Path, task: Option<String>, dataset: Option<String>) -> Result<u8, CliError> {
    let task = task
        .or(file.task)
        .ok_or_else(|| CliError::Config("--task is required".into()))?;
    let (TaskFile { task: decl, context }, report) = load_task_file(&config::resolve(base, &task))?;
    let mut findings: Vec<String> = report.findings.iter().map(ToString::to_string).collect();
    if let Some(dataset) = dataset.or(file.dataset) {
        match parse_dataset(&config::resolve(base, &dataset), &decl) {
            Ok(examples) => {
                let fractions = slrc_core::dataset::SplitFractions::new(
                    file.split.train.unwrap_or(0.6),
                    file.split.val.unwrap_or(0.2),
                    file.split.test.unwrap_or(0.2),
                );
                match split_dataset(&examples, fractions, file.split.seed.unwrap_or(42)) {
                    Ok(split) => {
                        for label in split.missing_labels(&decl) {
                            eprintln!("WARNING dataset: label {label} has no gold examples");
                        }
                    }
                    Err(e) => findings.push(format!("split: {e}")),
                }
            }
            Err(DatasetError::Io { path, source }) => return Err(CliError::Io(format!("{path}: {source}"))),
            Err(e) => findings.push(format!("dataset: {e}")),
        }
    }
    log::info!("context {} version {}", context.version, decl.version);
    for f in &findings {
        println!("FINDING {f}");
    }
    if findings.is_empty() {
        println!("OK");
        Ok(0)
    } else {
        Ok(1)
    }
}

fn open_cache(base: &Path, path: Option<&str>) -> Result<Option<ResponseCache>, CliError> {
    path.map(|p| ResponseCache::open(&config::resolve(base, p)).map_err(CliError::from))
        .transpose()
}

fn cmd_compile(file: FileConfig, base: PathBuf, a: CompileArgs) -> Result<u8, CliError> {
    let overrides = Overrides {
        task: a.task,
        dataset: a.dataset,
        output: a.output,
        cache: a.cache,
        backend: a.backend,
        model: a.model,
        strategy: a.strategy,
        budget: a.budget,
        max_exemplars: a.max_exemplars,
        search_seed: a.search_seed,
        objective: a.objective,
        workers: a.workers,
        instructions: a.instructions,
    };
    let eff = Effective::resolve(file, base, overrides)?;
    let (TaskFile { task: decl, context }, report) = load_task_file(&eff.path(&eff.task))?;
    if !report.is_ok() {
        for f in &report.findings {
            println!("FINDING {f}");
        }
        return Err(CliError::Failed("task file has findings; run `slrc validate`".into()));
    }
    let examples = parse_dataset(&eff.path(&eff.dataset), &decl)?;
    let split = split_dataset(&examples, eff.split.fractions(), eff.split.seed)?;
    let backend = eff.backend.build(&eff.base)?;
    let cache = open_cache(&eff.base, eff.cache.as_deref())?;
    let source = match &cache {
        Some(cache) => CompletionSource::Cached {
            cache,
            backend: backend.as_ref(),
        },
        None => CompletionSource::Direct(backend.as_ref()),
    };
    let out = compiler::compile(&decl, &context, &split, &eff.search, &eff.decoding, source)?;
    let bundle = Bundle::from_compile(
        &out,
        &split,
        &eff.search,
        RunContext {
            fractions: eff.split.fractions(),
            split_seed: eff.split.seed,
            backend_kind: eff.backend.kind.clone(),
            controls: canonical::to_value(&eff)?,
        },
    )?;
    let out_dir = eff.path(&eff.output);
    artifact::package(&bundle, &out_dir, a.force)?;

    let summary = &out.runlog.summary;
    println!("winner {}", out.winner.candidate_id);
    println!(
        "candidates {} backend_requests {} of budget {}",
        summary.candidates_evaluated, summary.search_backend_calls, eff.search.budget
    );
    print_report("validation", &out.validation);
    if let Some(test) = &out.test {
        print_report("test", test);
    }
    println!("bundle {}", out_dir.display());
    Ok(0)
}

fn print_report(split: &str, report: &SplitReport) {
    let flag = |f: Option<ScoreFlag>| match f.map(serde_json::to_value) {
        Some(Ok(serde_json::Value::String(s))) => format!(" ({s})"),
        _ => String::new(),
    };
    println!("{split} {} {}{}", report.objective, report.value, flag(report.flag));
    for (name, score) in &report.metrics {
        if name != report.objective.name() {
            println!("{split} {name} {}{}", score.value, flag(score.flag));
        }
    }
    if report.parse_failures > 0 {
        println!("{split} parse_failures {}", report.parse_failures);
    }
}

/// Backend and cache from flags, falling back to the config file.
struct Source {
    backend: Option<Box<dyn Backend>>,
    cache: Option<ResponseCache>,
}

impl Source {
    fn resolve(
        file: &FileConfig,
        base: &Path,
        backend: Option<String>,
        cache: Option<String>,
    ) -> Result<Self, CliError> {
        let backend = match backend {
            Some(spec) => Some(
                BackendChoice::parse_flag(&spec, &file.backend)?.build(&std::env::current_dir().unwrap_or_default())?,
            ),
            None if file.backend.kind.is_some() => Some(BackendChoice::from_section(&file.backend)?.build(base)?),
            None => None,
        };
        let cache = match cache {
            Some(p) => open_cache(Path::new(""), Some(&p))?,
            None => open_cache(base, file.cache.as_deref())?,
        };
        if backend.is_none() && cache.is_none() {
            return Err(CliError::Config("need --backend, --cache or both".into()));
        }
        Ok(Self { backend, cache })
    }

    fn source(&self) -> CompletionSource<'_> {
        match (&self.backend, &self.cache) {
            (Some(b), Some(c)) => CompletionSource::Cached {
                cache: c,
                backend: b.as_ref(),
            },
            (Some(b), None) => CompletionSource::Direct(b.as_ref()),
            (None, Some(c)) => CompletionSource::CacheOnly(c),
            (None, None) => unreachable!("checked in resolve"),
        }
    }
}

fn load_bundle(bundle: &Path, no_verify: bool) -> Result<artifact::LoadedBundle, CliError> {
    if no_verify {
        eprintln!("warning: --no-verify: bundle integrity is not enforced");
    }
    artifact::load_program(bundle, !no_verify).map_err(|e| match e {
        ArtifactError::Tampered(files) => CliError::Failed(format!(
            "bundle failed verification ({}); refusing to use it",
            files.join(", ")
        )),
        other => other.into(),
    })
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut text = Vec::new();
    for item in items {
        text.extend(canonical::canonicalize(item)?);
        text.push(b'\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_screen(
    file: &FileConfig,
    base: &Path,
    bundle: &Path,
    input: &Path,
    out: &Path,
    s: &SourceArgs,
) -> Result<u8, CliError> {
    let loaded = load_bundle(bundle, s.no_verify)?;
    let records = records::read_records(input, &loaded.program.declaration)?;
    let source = Source::resolve(file, base, s.backend.clone(), s.cache.clone())?;
    let (outcomes, counts) = screen_batch(&loaded.program, &records, source.source(), s.workers)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write_jsonl(&out.join("outcomes.jsonl"), &outcomes)?;
    let review: Vec<_> = outcomes
        .iter()
        .filter(|o| o.resolved == Resolution::ReviewQueue)
        .collect();
    write_jsonl(&out.join("review_queue.jsonl"), &review)?;
    let counts_path = out.join("prisma_counts.json");
    std::fs::write(&counts_path, canonical::canonicalize(&counts)?)
        .map_err(|e| CliError::Io(format!("{}: {e}", counts_path.display())))?;
    println!(
        "screened {} included {} excluded {} review_queue {} (unsure {}, parse_failures {})",
        counts.screened, counts.included, counts.excluded, counts.review_queue, counts.unsure, counts.parse_failures
    );
    Ok(0)
}

fn cmd_eval(
    file: &FileConfig,
    base: &Path,
    bundle: &Path,
    dataset: &Path,
    out: Option<&Path>,
    s: &SourceArgs,
) -> Result<u8, CliError> {
    let loaded = load_bundle(bundle, s.no_verify)?;
    let decl = &loaded.program.declaration;
    let examples = parse_dataset(dataset, decl)?;
    let source = Source::resolve(file, base, s.backend.clone(), s.cache.clone())?;
    let (items, _) = compiler::score_items(&loaded.program, &examples, source.source(), s.workers)?;
    let report = SplitReport::from_items(
        items,
        &decl.label_space,
        loaded.config.search.objective,
        decl.unsure_policy,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;
    print_report("eval", &report);
    if let Some(path) = out {
        std::fs::write(path, canonical::canonicalize(&report)?)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(0)
}

fn cmd_verify(bundle: &Path) -> Result<u8, CliError> {
    let report = match artifact::verify(bundle) {
        Ok(r) => r,
        Err(ArtifactError::MissingManifest(_)) => {
            println!("FAIL {}: missing", artifact::MANIFEST_FILE);
            return Ok(1);
        }
        Err(e) => return Err(e.into()),
    };
    for check in &report.files {
        let status = if check.ok { "ok  " } else { "FAIL" };
        println!("{status} {}: {}", check.file, check.detail);
    }
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_replay(
    file: &FileConfig,
    base: &Path,
    bundle: &Path,
    backend: Option<String>,
    cache: Option<String>,
    workers: usize,
) -> Result<u8, CliError> {
    let source = Source::resolve(file, base, backend, cache)?;
    let report = artifact::replay(bundle, source.source(), workers)?;
    for m in &report.mismatches {
        println!("MISMATCH {m}");
    }
    if report.matches() {
        println!("replay matches {}", artifact::METRICS_FILE);
        Ok(0)
    } else {
        if report.mismatches.is_empty() {
            println!("MISMATCH replayed {} is not byte-identical", artifact::METRICS_FILE);
        }
        Ok(1)
    }
}
