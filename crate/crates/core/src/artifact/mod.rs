//! Bundles: packaging a compiled program, verifying a bundle on disk,
//! loading it back as a runnable program and replaying its metrics.
//!
//! A bundle is a directory with exactly these files:
//!
//! | file             | content                                              |
//! |------------------|------------------------------------------------------|
//! | `config.yaml`    | task, context, decoding, search, split, hashes       |
//! | `prompt.txt`     | the winning instruction, verbatim                    |
//! | `exemplars.json` | the winning exemplars, full content                  |
//! | `metrics.json`   | validation and test reports with per-item records    |
//! | `run.log`        | the search log, one JSON object per line             |
//! | `prisma.json`    | PRISMA 2020 items the bundle supports                |
//! | `manifest.json`  | SHA-256 of every other file, sealed                  |
//!
//! Timestamps appear only in `manifest.json` and `run.log`.

mod manifest;

pub use manifest::Manifest;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backend::{BackendError, CompletionSource};
use crate::canonical::{self, CanonicalError};
use crate::compiler::{
    score_items, strip_volatile, CandidateProgram, CompileError, CompileOutput, ItemRecord, SearchConfig, SplitReport,
};
use crate::dataset::{DatasetSplit, GoldExample, SplitFractions};
use crate::metrics::{MetricsError, Objective};
use crate::rng::RNG_ALGORITHM;
use crate::screening::ScreeningProgram;
use crate::taskspec::{context_hash, ContextSpec, DecodingParams, TaskDeclaration, UnsurePolicy};
use crate::TOOL_VERSION;

pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.yaml";
pub const PROMPT_FILE: &str = "prompt.txt";
pub const EXEMPLARS_FILE: &str = "exemplars.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_LOG_FILE: &str = "run.log";
pub const PRISMA_FILE: &str = "prisma.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Files covered by the manifest, in write order.
pub const CONTENT_FILES: [&str; 6] = [
    CONFIG_FILE,
    PROMPT_FILE,
    EXEMPLARS_FILE,
    METRICS_FILE,
    RUN_LOG_FILE,
    PRISMA_FILE,
];

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} is not empty; pass force to overwrite")]
    RefusesOverwrite(PathBuf),
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error("bundle schema version {found} is not supported (this build reads {supported})")]
    SchemaVersionMismatch { found: u64, supported: u32 },
    #[error("bundle failed verification: {}", .0.join(", "))]
    Tampered(Vec<String>),
    #[error("context hash in config.yaml is {recorded} but the context hashes to {actual}")]
    ContextHashMismatch { recorded: String, actual: String },
    #[error("{file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Compile(CompileError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

impl From<CompileError> for ArtifactError {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Backend(b) => ArtifactError::Backend(b),
            other => ArtifactError::Compile(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(file: &str, reason: impl ToString) -> ArtifactError {
    ArtifactError::Malformed {
        file: file.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub fractions: SplitFractions,
    pub seed: u64,
    pub rng: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub hash: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub kind: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinnerRecord {
    pub candidate_id: String,
    pub prompt_sha256: String,
    pub exemplar_ids: Vec<String>,
}

/// Contents of `config.yaml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub schema_version: u32,
    pub tool_version: String,
    pub task: TaskDeclaration,
    pub context: ContextSpec,
    pub context_hash: String,
    pub decoding: DecodingParams,
    pub search: SearchConfig,
    pub split: SplitRecord,
    pub dataset: DatasetRecord,
    pub backend: BackendRecord,
    pub winner: WinnerRecord,
    /// Run controls echoed by the caller, e.g. the effective CLI config.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub controls: Value,
}

/// Contents of `metrics.json`. Items carry their inputs so the bundle can
/// be replayed without the original dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub objective: Objective,
    pub unsure_policy: UnsurePolicy,
    pub validation: SplitReport,
    pub test: Option<SplitReport>,
}

/// How the caller produced the split and which backend served the run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub fractions: SplitFractions,
    pub split_seed: u64,
    pub backend_kind: String,
    pub controls: Value,
}

/// A bundle in memory, ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config: BundleConfig,
    pub prompt: String,
    pub exemplars: Vec<GoldExample>,
    pub metrics: MetricsFile,
    pub run_log: String,
}

fn with_inputs(report: &SplitReport, examples: &[GoldExample]) -> SplitReport {
    let by_id: BTreeMap<&str, &GoldExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut report = report.clone();
    for item in &mut report.items {
        item.inputs = by_id.get(item.id.as_str()).map(|e| e.inputs.clone());
    }
    report
}

impl Bundle {
    pub fn from_compile(
        out: &CompileOutput,
        split: &DatasetSplit,
        search: &SearchConfig,
        run: RunContext,
    ) -> Result<Self, ArtifactError> {
        let header = &out.runlog.header;
        let program = &out.program;
        let config = BundleConfig {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            task: program.declaration.clone(),
            context: program.context.clone(),
            context_hash: header.context_hash.clone(),
            decoding: program.params.clone(),
            search: search.clone(),
            split: SplitRecord {
                fractions: run.fractions,
                seed: run.split_seed,
                rng: RNG_ALGORITHM.to_string(),
                train_ids: header.train_ids.clone(),
                val_ids: header.val_ids.clone(),
                test_ids: header.test_ids.clone(),
            },
            dataset: DatasetRecord {
                hash: header.dataset_hash.clone(),
                size: split.train.len() + split.val.len() + split.test.len(),
            },
            backend: BackendRecord {
                kind: run.backend_kind,
                model_id: program.params.model_id.clone(),
            },
            winner: WinnerRecord {
                candidate_id: out.winner.candidate_id.clone(),
                prompt_sha256: canonical::sha256_hex(out.winner.instruction.as_bytes()),
                exemplar_ids: out.winner.exemplars.clone(),
            },
            controls: run.controls,
        };
        Ok(Self {
            config,
            prompt: out.winner.instruction.clone(),
            exemplars: program.exemplars.clone(),
            metrics: MetricsFile {
                objective: search.objective,
                unsure_policy: program.declaration.unsure_policy,
                validation: with_inputs(&out.validation, &split.val),
                test: out.test.as_ref().map(|t| with_inputs(t, &split.test)),
            },
            run_log: out.runlog.to_jsonl(false)?,
        })
    }

    /// The bytes of each content file, keyed by file name.
    pub fn render_files(&self) -> Result<BTreeMap<&'static str, Vec<u8>>, ArtifactError> {
        let config = serde_yaml::to_string(&self.config).map_err(|e| malformed(CONFIG_FILE, e))?;
        Ok(BTreeMap::from([
            (CONFIG_FILE, config.into_bytes()),
            (PROMPT_FILE, self.prompt.clone().into_bytes()),
            (EXEMPLARS_FILE, canonical::canonicalize(&self.exemplars)?),
            (METRICS_FILE, canonical::canonicalize(&self.metrics)?),
            (RUN_LOG_FILE, self.run_log.clone().into_bytes()),
            (PRISMA_FILE, canonical::canonical_value_bytes(&prisma_mapping())?),
        ]))
    }
}

/// PRISMA 2020 checklist items this bundle gives evidence for.
pub fn prisma_mapping() -> Value {
    json!({
        "checklist": "PRISMA 2020",
        "items": [
            {
                "item": "5",
                "topic": "Eligibility criteria",
                "supported_by": [CONFIG_FILE],
                "note": "Criteria, study aims and research question are stored verbatim with their hash."
            },
            {
                "item": "8",
                "topic": "Selection process",
                "supported_by": [CONFIG_FILE, PROMPT_FILE, EXEMPLARS_FILE],
                "note": "Model id, decoding parameters, instruction and exemplars fully specify the automated screener."
            },
            {
                "item": "16a",
                "topic": "Study selection results",
                "supported_by": [METRICS_FILE],
                "note": "Per-item decisions and parse failures; screening runs add PRISMA flow counts."
            },
            {
                "item": "24a",
                "topic": "Registration and protocol",
                "supported_by": [MANIFEST_FILE],
                "note": "The sealed manifest identifies this exact screening protocol by content hash."
            },
            {
                "item": "24b",
                "topic": "Protocol access",
                "supported_by": [CONFIG_FILE, PROMPT_FILE, EXEMPLARS_FILE],
                "note": "The protocol is the bundle itself and can be shared as a directory."
            },
            {
                "item": "27",
                "topic": "Availability of data, code and other materials",
                "supported_by": [METRICS_FILE, RUN_LOG_FILE, MANIFEST_FILE],
                "note": "Hashes of data, prompts and decoding plus per-candidate results allow recomputation."
            }
        ]
    })
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes the bundle into `out_dir` with the manifest last.
pub fn package(bundle: &Bundle, out_dir: &Path, force: bool) -> Result<Manifest, ArtifactError> {
    package_at(bundle, out_dir, force, &now_rfc3339())
}

/// [`package`] with an explicit manifest timestamp.
pub fn package_at(bundle: &Bundle, out_dir: &Path, force: bool, created_at: &str) -> Result<Manifest, ArtifactError> {
    if out_dir.exists() {
        let mut entries = fs::read_dir(out_dir).map_err(io_err(out_dir))?;
        if entries.next().is_some() && !force {
            return Err(ArtifactError::RefusesOverwrite(out_dir.to_path_buf()));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let files = bundle.render_files()?;
    let mut digests = BTreeMap::new();
    for (name, bytes) in &files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        digests.insert(name.to_string(), canonical::sha256_hex(bytes));
    }
    let manifest = Manifest::new(SCHEMA_VERSION, TOOL_VERSION, created_at, digests)?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_bytes()?).map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileCheck {
    pub file: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub files: Vec<FileCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.files.iter().all(|c| c.ok)
    }

    /// Files with at least one failed check, sorted, without repeats.
    pub fn failed_files(&self) -> Vec<String> {
        let mut out: Vec<String> = self.files.iter().filter(|c| !c.ok).map(|c| c.file.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    fn push(&mut self, file: &str, ok: bool, detail: impl Into<String>) {
        self.files.push(FileCheck {
            file: file.to_string(),
            ok,
            detail: detail.into(),
        });
    }
}

/// Checks digests and, when they all hold, the bundle's internal
/// consistency. Files outside the manifest are ignored.
pub fn verify(dir: &Path) -> Result<VerifyReport, ArtifactError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(ArtifactError::MissingManifest(dir.to_path_buf()));
    }
    let raw = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut report = VerifyReport::default();
    let manifest = match Manifest::parse_sealed(&raw) {
        Ok(m) => m,
        Err(reason) => {
            report.push(MANIFEST_FILE, false, reason);
            return Ok(report);
        }
    };
    let listed: Vec<&str> = manifest.files.keys().map(String::as_str).collect();
    let mut expected = CONTENT_FILES.to_vec();
    expected.sort();
    if listed != expected {
        report.push(MANIFEST_FILE, false, format!("lists {listed:?}, expected {expected:?}"));
        return Ok(report);
    }
    if manifest.schema_version != SCHEMA_VERSION {
        report.push(
            MANIFEST_FILE,
            false,
            format!(
                "schema version {} (supported {SCHEMA_VERSION})",
                manifest.schema_version
            ),
        );
        return Ok(report);
    }
    report.push(MANIFEST_FILE, true, "sealed");

    let mut contents = BTreeMap::new();
    for (name, digest) in &manifest.files {
        let path = dir.join(name);
        match fs::read(&path) {
            Ok(bytes) => {
                let actual = canonical::sha256_hex(&bytes);
                if &actual == digest {
                    report.push(name, true, "digest matches");
                } else {
                    report.push(name, false, format!("sha256 {actual}, manifest says {digest}"));
                }
                contents.insert(name.as_str(), bytes);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => report.push(name, false, "missing"),
            Err(e) => return Err(ArtifactError::Io { path, source: e }),
        }
    }
    if report.passed() {
        check_consistency(&contents, &mut report);
    }
    Ok(report)
}

fn utf8<'a>(contents: &'a BTreeMap<&str, Vec<u8>>, file: &str) -> Result<&'a str, String> {
    std::str::from_utf8(&contents[file]).map_err(|e| format!("not UTF-8: {e}"))
}

fn check_consistency(contents: &BTreeMap<&str, Vec<u8>>, report: &mut VerifyReport) {
    let config: BundleConfig =
        match utf8(contents, CONFIG_FILE).and_then(|t| serde_yaml::from_str(t).map_err(|e| e.to_string())) {
            Ok(c) => c,
            Err(e) => return report.push(CONFIG_FILE, false, e),
        };
    match context_hash(&config.context) {
        Ok(h) if h == config.context_hash => {}
        Ok(h) => report.push(
            CONFIG_FILE,
            false,
            format!("context hashes to {h}, recorded {}", config.context_hash),
        ),
        Err(e) => report.push(CONFIG_FILE, false, e.to_string()),
    }

    let prompt = utf8(contents, PROMPT_FILE).unwrap_or_default();
    if canonical::sha256_hex(prompt.as_bytes()) != config.winner.prompt_sha256
        || !config.search.instructions.iter().any(|i| i == prompt)
    {
        report.push(
            PROMPT_FILE,
            false,
            "does not match the winning instruction in config.yaml",
        );
    }
    match CandidateProgram::new(prompt, config.winner.exemplar_ids.clone(), config.decoding.clone()) {
        Ok(c) if c.candidate_id == config.winner.candidate_id => {}
        _ => report.push(
            CONFIG_FILE,
            false,
            "winner candidate_id does not match prompt, exemplars and decoding",
        ),
    }

    match serde_json::from_slice::<Vec<GoldExample>>(&contents[EXEMPLARS_FILE]) {
        Ok(exemplars) => {
            let ids: Vec<&String> = exemplars.iter().map(|e| &e.id).collect();
            let expected: Vec<&String> = config.winner.exemplar_ids.iter().collect();
            if ids != expected {
                report.push(
                    EXEMPLARS_FILE,
                    false,
                    format!("ids {ids:?}, config.yaml lists {expected:?}"),
                );
            } else if let Some(id) = ids.iter().find(|id| !config.split.train_ids.contains(id)) {
                report.push(
                    EXEMPLARS_FILE,
                    false,
                    format!("exemplar {id} is not in the train split"),
                );
            }
        }
        Err(e) => report.push(EXEMPLARS_FILE, false, e.to_string()),
    }

    match serde_json::from_slice::<MetricsFile>(&contents[METRICS_FILE]) {
        Ok(metrics) => {
            for problem in metrics_problems(&metrics, &config) {
                report.push(METRICS_FILE, false, problem);
            }
        }
        Err(e) => report.push(METRICS_FILE, false, e.to_string()),
    }

    match utf8(contents, RUN_LOG_FILE)
        .map_err(|e| e.to_string())
        .and_then(run_log_winner)
    {
        Ok(w) if w == config.winner.candidate_id => {}
        Ok(w) => report.push(RUN_LOG_FILE, false, format!("summary names winner {w}")),
        Err(e) => report.push(RUN_LOG_FILE, false, e),
    }

    match serde_json::from_slice::<Value>(&contents[PRISMA_FILE]) {
        Ok(v) if v == prisma_mapping() => {}
        _ => report.push(PRISMA_FILE, false, "is not the PRISMA mapping this tool writes"),
    }
}

fn run_log_winner(text: &str) -> Result<String, String> {
    for line in text.lines().rev().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if v["kind"] == "summary" {
            return v["winner"]
                .as_str()
                .map(String::from)
                .ok_or("summary without winner".into());
        }
    }
    Err("no summary line".into())
}

/// Aggregates that disagree with a recomputation from the per-item records.
fn metrics_problems(metrics: &MetricsFile, config: &BundleConfig) -> Vec<String> {
    let mut out = Vec::new();
    let splits = [
        ("validation", Some(&metrics.validation), &config.split.val_ids),
        ("test", metrics.test.as_ref(), &config.split.test_ids),
    ];
    for (name, report, ids) in splits {
        let Some(report) = report else {
            if !ids.is_empty() {
                out.push(format!("{name}: report missing"));
            }
            continue;
        };
        let item_ids: Vec<&String> = report.items.iter().map(|i| &i.id).collect();
        if item_ids != ids.iter().collect::<Vec<_>>() {
            out.push(format!("{name}: item ids differ from the split in config.yaml"));
        }
        for item in &report.items {
            let expected = match &item.predicted {
                Some(p) if *p == item.gold => 1.0,
                _ => 0.0,
            };
            if item.score != expected {
                out.push(format!(
                    "{name}: item {} has score {}, expected {expected}",
                    item.id, item.score
                ));
            }
        }
        match SplitReport::from_items(
            report.items.clone(),
            &config.task.label_space,
            metrics.objective,
            metrics.unsure_policy,
        ) {
            Ok(again) if again == *report => {}
            Ok(_) => out.push(format!("{name}: aggregates do not match the per-item records")),
            Err(e) => out.push(format!("{name}: {e}")),
        }
    }
    if metrics.objective != config.search.objective {
        out.push("objective differs from config.yaml".into());
    }
    out
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>, ArtifactError> {
    let path = dir.join(name);
    fs::read(&path).map_err(io_err(&path))
}

fn read_config(dir: &Path) -> Result<BundleConfig, ArtifactError> {
    let raw = read_file(dir, CONFIG_FILE)?;
    let tree: serde_yaml::Value = serde_yaml::from_slice(&raw).map_err(|e| malformed(CONFIG_FILE, e))?;
    let found = tree
        .get("schema_version")
        .and_then(serde_yaml::Value::as_u64)
        .ok_or_else(|| malformed(CONFIG_FILE, "missing schema_version"))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(ArtifactError::SchemaVersionMismatch {
            found,
            supported: SCHEMA_VERSION,
        });
    }
    serde_yaml::from_value(tree).map_err(|e| malformed(CONFIG_FILE, e))
}

/// A bundle read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub config: BundleConfig,
    pub program: ScreeningProgram,
}

/// Rebuilds the screening program. With `verify_first`, a bundle that
/// fails [`verify`] is refused.
pub fn load_program(dir: &Path, verify_first: bool) -> Result<LoadedBundle, ArtifactError> {
    let config = read_config(dir)?;
    let report = verify(dir);
    match (verify_first, report) {
        (true, Ok(r)) if !r.passed() => return Err(ArtifactError::Tampered(r.failed_files())),
        (true, Err(e)) => return Err(e),
        (false, Ok(r)) if !r.passed() => {
            log::warn!(
                "loading unverified bundle; failing files: {}",
                r.failed_files().join(", ")
            )
        }
        (false, Err(e)) => log::warn!("loading unverified bundle: {e}"),
        _ => {}
    }
    let actual = context_hash(&config.context)?;
    if actual != config.context_hash {
        return Err(ArtifactError::ContextHashMismatch {
            recorded: config.context_hash.clone(),
            actual,
        });
    }
    let prompt = String::from_utf8(read_file(dir, PROMPT_FILE)?).map_err(|e| malformed(PROMPT_FILE, e))?;
    let exemplars: Vec<GoldExample> =
        serde_json::from_slice(&read_file(dir, EXEMPLARS_FILE)?).map_err(|e| malformed(EXEMPLARS_FILE, e))?;
    let program = ScreeningProgram::new(
        config.task.clone(),
        config.context.clone(),
        prompt,
        exemplars,
        config.decoding.clone(),
    );
    Ok(LoadedBundle { config, program })
}

/// Outcome of re-running a bundle's evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub replayed: MetricsFile,
    /// True when the replayed metrics file is byte-identical to the stored one.
    pub identical: bool,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.identical && self.mismatches.is_empty()
    }
}

fn golds_of(report: &SplitReport) -> Result<Vec<GoldExample>, ArtifactError> {
    report
        .items
        .iter()
        .map(|item| {
            Ok(GoldExample {
                id: item.id.clone(),
                inputs: item
                    .inputs
                    .clone()
                    .ok_or_else(|| malformed(METRICS_FILE, format!("item {} has no inputs", item.id)))?,
                decision: item.gold.clone(),
                reasoning: None,
            })
        })
        .collect()
}

fn compare_items(split: &str, stored: &[ItemRecord], replayed: &[ItemRecord], out: &mut Vec<String>) {
    for (a, b) in stored.iter().zip(replayed) {
        if a.request_key != b.request_key {
            out.push(format!("{split}/{}: prompt renders differently", a.id));
        }
        if a.predicted != b.predicted {
            out.push(format!(
                "{split}/{}: stored {:?}, replayed {:?}",
                a.id, a.predicted, b.predicted
            ));
        }
    }
}

fn replay_split(
    program: &ScreeningProgram,
    stored: &SplitReport,
    metrics: &MetricsFile,
    source: CompletionSource<'_>,
    workers: usize,
    name: &str,
    mismatches: &mut Vec<String>,
) -> Result<SplitReport, ArtifactError> {
    let golds = golds_of(stored)?;
    let (mut items, _) = score_items(program, &golds, source, workers)?;
    for (item, gold) in items.iter_mut().zip(&golds) {
        item.inputs = Some(gold.inputs.clone());
    }
    compare_items(name, &stored.items, &items, mismatches);
    let report = SplitReport::from_items(
        items,
        &program.declaration.label_space,
        metrics.objective,
        metrics.unsure_policy,
    )?;
    if report.value != stored.value {
        mismatches.push(format!(
            "{name}: {} stored {}, replayed {}",
            metrics.objective, stored.value, report.value
        ));
    }
    Ok(report)
}

/// Re-renders every validation and test prompt, completes it through
/// `source` and recomputes the metrics. The bundle must verify.
pub fn replay(dir: &Path, source: CompletionSource<'_>, workers: usize) -> Result<ReplayReport, ArtifactError> {
    let loaded = load_program(dir, true)?;
    let raw = read_file(dir, METRICS_FILE)?;
    let stored: MetricsFile = serde_json::from_slice(&raw).map_err(|e| malformed(METRICS_FILE, e))?;
    let mut mismatches = Vec::new();
    let validation = replay_split(
        &loaded.program,
        &stored.validation,
        &stored,
        source,
        workers,
        "validation",
        &mut mismatches,
    )?;
    let test = match &stored.test {
        Some(t) => Some(replay_split(
            &loaded.program,
            t,
            &stored,
            source,
            workers,
            "test",
            &mut mismatches,
        )?),
        None => None,
    };
    let replayed = MetricsFile {
        objective: stored.objective,
        unsure_policy: stored.unsure_policy,
        validation,
        test,
    };
    let identical = canonical::canonicalize(&replayed)? == raw;
    Ok(ReplayReport {
        replayed,
        identical,
        mismatches,
    })
}

/// Timestamp-free form of a bundle's run log, for run-to-run comparison.
pub fn stripped_run_log(dir: &Path) -> Result<String, ArtifactError> {
    let raw = read_file(dir, RUN_LOG_FILE)?;
    let text = String::from_utf8(raw).map_err(|e| malformed(RUN_LOG_FILE, e))?;
    Ok(strip_volatile(&text)?)
}
