//! Budgeted search for the instruction and exemplar set that maximise a
//! validation metric.
//!
//! The budget is counted in uncached LM requests. A candidate is started
//! only when the remaining budget covers one request per validation item,
//! so the search never overshoots.

mod search;

pub use search::{
    enumerate_candidates, preference, space_size, CandidateProgram, CandidateStream, SearchConfig, Strategy,
};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::backend::{request_key, BackendError, CompletionSource};
use crate::canonical::{self, CanonicalError};
use crate::dataset::{dataset_hash, DatasetError, DatasetSplit, GoldExample};
use crate::metrics::{self, ConfusionMatrix, MetricsError, Objective, Score, ScoreFlag};
use crate::parallel::ordered_map;
use crate::screening::{parse_completion, render_prompt, AbstractRecord, ScreeningError, ScreeningProgram};
use crate::taskspec::{
    context_hash, validate_context, validate_declaration, validate_params, ContextSpec, DecodingParams,
    TaskDeclaration, UnsurePolicy,
};

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error("budget exhausted: {remaining} requests left, a candidate needs {needed}")]
    BudgetExhausted { remaining: u64, needed: u64 },
    #[error("no candidate was evaluated")]
    NoRecords,
    #[error("invalid compile configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// One scored item. `inputs` is only filled where a record must be
/// replayable on its own (the bundle's metrics file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub gold: String,
    pub predicted: Option<String>,
    #[serde(serialize_with = "canonical::finite")]
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub request_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub candidate_id: String,
    pub instruction_sha256: String,
    pub exemplars: Vec<String>,
    pub items: Vec<ItemRecord>,
    #[serde(serialize_with = "canonical::finite")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ScoreFlag>,
    pub parse_failures: u64,
    /// Requests issued, one per item.
    pub requests: u64,
    /// Requests that missed the cache and reached the backend.
    pub backend_calls: u64,
    pub timestamp: String,
}

/// Aggregate view of one split under the winning program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub objective: Objective,
    #[serde(serialize_with = "canonical::finite")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ScoreFlag>,
    pub metrics: BTreeMap<String, Score>,
    pub confusion: ConfusionMatrix,
    pub parse_failures: u64,
    pub items: Vec<ItemRecord>,
}

impl SplitReport {
    pub fn from_items(
        items: Vec<ItemRecord>,
        label_space: &[String],
        objective: Objective,
        policy: UnsurePolicy,
    ) -> Result<Self, MetricsError> {
        let mut confusion = ConfusionMatrix::new(label_space);
        for item in &items {
            confusion.record(&item.gold, item.predicted.as_deref())?;
        }
        let mut all = BTreeMap::new();
        for o in Objective::ALL {
            all.insert(o.name().to_string(), metrics::compute(&confusion, o, policy)?);
        }
        let headline = all[objective.name()];
        Ok(Self {
            objective,
            value: headline.value,
            flag: headline.flag,
            metrics: all,
            parse_failures: items.iter().filter(|i| i.predicted.is_none()).count() as u64,
            confusion,
            items,
        })
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Builds the runnable program a candidate stands for.
pub fn candidate_program(
    decl: &TaskDeclaration,
    ctx: &ContextSpec,
    cand: &CandidateProgram,
    train: &[GoldExample],
) -> Result<ScreeningProgram, CompileError> {
    let by_id: HashMap<&str, &GoldExample> = train.iter().map(|e| (e.id.as_str(), e)).collect();
    let exemplars = cand
        .exemplars
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|e| (*e).clone())
                .ok_or_else(|| CompileError::Config(format!("exemplar {id} is not in the train split")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScreeningProgram::new(
        decl.clone(),
        ctx.clone(),
        cand.instruction.clone(),
        exemplars,
        cand.params.clone(),
    ))
}

/// Scores `program` on `items`. Unparseable replies score 0 and are
/// flagged; backend errors abort.
pub fn score_items(
    program: &ScreeningProgram,
    items: &[GoldExample],
    source: CompletionSource<'_>,
    workers: usize,
) -> Result<(Vec<ItemRecord>, u64), CompileError> {
    let labels = &program.declaration.label_space;
    let results = ordered_map(workers, items, |gold| -> Result<(ItemRecord, bool), CompileError> {
        let request = render_prompt(program, &AbstractRecord::from(gold))?;
        let key = request_key(&request)?;
        let completion = source.complete(&request)?;
        let (predicted, parse_error) = match parse_completion(&completion.text, labels) {
            Ok(p) => (Some(p.decision), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let score = match &predicted {
            Some(p) => f64::from(metrics::exact_match(labels, &gold.decision, p)?),
            None => 0.0,
        };
        let item = ItemRecord {
            id: gold.id.clone(),
            gold: gold.decision.clone(),
            predicted,
            score,
            parse_error,
            request_key: key,
            inputs: None,
        };
        Ok((item, !completion.cached))
    });
    let mut records = Vec::with_capacity(items.len());
    let mut backend_calls = 0;
    for r in results {
        let (item, uncached) = r?;
        backend_calls += u64::from(uncached);
        records.push(item);
    }
    Ok((records, backend_calls))
}

/// Evaluates one candidate on the validation items, refusing to start when
/// `remaining` cannot cover one request per item.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_candidate(
    program: &ScreeningProgram,
    cand: &CandidateProgram,
    val: &[GoldExample],
    source: CompletionSource<'_>,
    remaining: u64,
    objective: Objective,
    workers: usize,
) -> Result<EvaluationRecord, CompileError> {
    let needed = val.len() as u64;
    if remaining < needed {
        return Err(CompileError::BudgetExhausted { remaining, needed });
    }
    let (items, backend_calls) = score_items(program, val, source, workers)?;
    let report = SplitReport::from_items(
        items,
        &program.declaration.label_space,
        objective,
        program.declaration.unsure_policy,
    )?;
    Ok(EvaluationRecord {
        candidate_id: cand.candidate_id.clone(),
        instruction_sha256: canonical::sha256_hex(cand.instruction.as_bytes()),
        exemplars: cand.exemplars.clone(),
        value: report.value,
        flag: report.flag,
        parse_failures: report.parse_failures,
        requests: needed,
        backend_calls,
        items: report.items,
        timestamp: now_rfc3339(),
    })
}

/// The preferred evaluated candidate: highest value, then fewer exemplars,
/// shorter instruction and lower candidate id.
pub fn select_best<'a>(
    records: &[EvaluationRecord],
    candidates: &'a [CandidateProgram],
) -> Result<&'a CandidateProgram, CompileError> {
    let by_id: HashMap<&str, &CandidateProgram> = candidates.iter().map(|c| (c.candidate_id.as_str(), c)).collect();
    let mut best: Option<(f64, &CandidateProgram)> = None;
    for record in records {
        let cand = by_id
            .get(record.candidate_id.as_str())
            .ok_or_else(|| CompileError::Config(format!("record for unknown candidate {}", record.candidate_id)))?;
        let here = (record.value, *cand);
        best = match best {
            Some(b) if preference(b, here).is_le() => Some(b),
            _ => Some(here),
        };
    }
    best.map(|(_, c)| c).ok_or(CompileError::NoRecords)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SpaceExhausted,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool_version: String,
    pub dataset_hash: String,
    pub context_hash: String,
    pub model_id: String,
    pub params: DecodingParams,
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: u64,
    pub max_exemplars: usize,
    pub objective: Objective,
    pub instruction_sha256: Vec<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub winner: String,
    #[serde(serialize_with = "canonical::finite")]
    pub value: f64,
    pub candidates_evaluated: u64,
    pub search_requests: u64,
    pub search_backend_calls: u64,
    pub test_backend_calls: u64,
    pub stop_reason: StopReason,
    pub elapsed_ms: u64,
    pub timestamp: String,
}

/// Everything a compile run did, in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub evaluations: Vec<EvaluationRecord>,
    pub test_evaluation: Option<EvaluationRecord>,
    pub summary: RunSummary,
}

/// Fields that vary between otherwise identical runs.
const VOLATILE_KEYS: &[&str] = &["timestamp", "elapsed_ms"];

fn jsonl_line<T: Serialize>(kind: &str, value: &T, strip: bool) -> Result<String, CanonicalError> {
    let mut tree = canonical::to_value(value)?;
    if let Value::Object(map) = &mut tree {
        map.insert("kind".into(), Value::String(kind.into()));
        if strip {
            for k in VOLATILE_KEYS {
                map.remove(*k);
            }
        }
    }
    let bytes = canonical::canonical_value_bytes(&tree)?;
    Ok(String::from_utf8(bytes).expect("canonical JSON is UTF-8"))
}

impl RunLog {
    /// One canonical JSON object per line, each tagged with `kind`.
    pub fn to_jsonl(&self, strip_volatile: bool) -> Result<String, CanonicalError> {
        let mut out = String::new();
        out.push_str(&jsonl_line("header", &self.header, strip_volatile)?);
        out.push('\n');
        for record in &self.evaluations {
            out.push_str(&jsonl_line("evaluation", record, strip_volatile)?);
            out.push('\n');
        }
        if let Some(record) = &self.test_evaluation {
            out.push_str(&jsonl_line("test_evaluation", record, strip_volatile)?);
            out.push('\n');
        }
        out.push_str(&jsonl_line("summary", &self.summary, strip_volatile)?);
        out.push('\n');
        Ok(out)
    }
}

/// Drops timestamps and durations from a serialized run log so two runs can
/// be compared byte for byte.
pub fn strip_volatile(jsonl: &str) -> Result<String, CanonicalError> {
    let mut out = String::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let mut tree: Value = serde_json::from_str(line).map_err(|e| CanonicalError::Encode(e.to_string()))?;
        if let Value::Object(map) = &mut tree {
            for k in VOLATILE_KEYS {
                map.remove(*k);
            }
        }
        out.push_str(std::str::from_utf8(&canonical::canonical_value_bytes(&tree)?).expect("UTF-8"));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompileOutput {
    pub winner: CandidateProgram,
    pub program: ScreeningProgram,
    pub candidates: Vec<CandidateProgram>,
    pub runlog: RunLog,
    pub validation: SplitReport,
    pub test: Option<SplitReport>,
}

fn check_inputs(
    decl: &TaskDeclaration,
    ctx: &ContextSpec,
    split: &DatasetSplit,
    cfg: &SearchConfig,
    params: &DecodingParams,
) -> Result<(), CompileError> {
    let mut report = validate_declaration(decl);
    report.extend(validate_context(ctx));
    report.extend(validate_params(params, true));
    let mut problems: Vec<String> = report.findings.iter().map(ToString::to_string).collect();
    problems.extend(cfg.problems());
    if !problems.is_empty() {
        return Err(CompileError::Config(problems.join("; ")));
    }
    if split.val.is_empty() {
        return Err(DatasetError::EmptyValSplit.into());
    }
    if cfg.budget < split.val.len() as u64 {
        return Err(CompileError::Config(format!(
            "search.budget {} is below the validation size {}; no candidate could be evaluated",
            cfg.budget,
            split.val.len()
        )));
    }
    Ok(())
}

/// Runs the search, selects the winner and evaluates it once on the test
/// split. Test requests are outside the search budget and logged apart.
pub fn compile(
    decl: &TaskDeclaration,
    ctx: &ContextSpec,
    split: &DatasetSplit,
    cfg: &SearchConfig,
    params: &DecodingParams,
    source: CompletionSource<'_>,
) -> Result<CompileOutput, CompileError> {
    check_inputs(decl, ctx, split, cfg, params)?;
    let started = Instant::now();
    let all: Vec<GoldExample> = split
        .train
        .iter()
        .chain(&split.val)
        .chain(&split.test)
        .cloned()
        .collect();
    let header = RunHeader {
        tool_version: crate::TOOL_VERSION.to_string(),
        dataset_hash: dataset_hash(&all)?,
        context_hash: context_hash(ctx)?,
        model_id: params.model_id.clone(),
        params: params.clone(),
        strategy: cfg.strategy,
        seed: cfg.seed,
        budget: cfg.budget,
        max_exemplars: cfg.max_exemplars,
        objective: cfg.objective,
        instruction_sha256: cfg
            .instructions
            .iter()
            .map(|i| canonical::sha256_hex(i.as_bytes()))
            .collect(),
        train_ids: DatasetSplit::ids(&split.train),
        val_ids: DatasetSplit::ids(&split.val),
        test_ids: DatasetSplit::ids(&split.test),
        timestamp: now_rfc3339(),
    };

    let train_ids = DatasetSplit::ids(&split.train);
    let mut stream = enumerate_candidates(cfg, &train_ids, params);
    let mut candidates = Vec::new();
    let mut evaluations: Vec<EvaluationRecord> = Vec::new();
    let mut spent: u64 = 0;
    let needed = split.val.len() as u64;
    let stop_reason = loop {
        if cfg.budget - spent < needed {
            break StopReason::BudgetExhausted;
        }
        let Some(cand) = stream.next() else {
            break StopReason::SpaceExhausted;
        };
        let program = candidate_program(decl, ctx, &cand, &split.train)?;
        let record = evaluate_candidate(
            &program,
            &cand,
            &split.val,
            source,
            cfg.budget - spent,
            cfg.objective,
            cfg.workers,
        )?;
        spent += record.backend_calls;
        stream.observe(&cand.candidate_id, record.value);
        log::debug!(
            "candidate {} ({} exemplars): {} = {}",
            &cand.candidate_id[..12],
            cand.exemplars.len(),
            cfg.objective,
            record.value
        );
        candidates.push(cand);
        evaluations.push(record);
    };

    let winner = select_best(&evaluations, &candidates)?.clone();
    let winner_record = evaluations
        .iter()
        .find(|r| r.candidate_id == winner.candidate_id)
        .expect("winner was evaluated");
    let program = candidate_program(decl, ctx, &winner, &split.train)?;
    let validation = SplitReport::from_items(
        winner_record.items.clone(),
        &decl.label_space,
        cfg.objective,
        decl.unsure_policy,
    )?;

    let mut test = None;
    let mut test_evaluation = None;
    if !split.test.is_empty() {
        let record = evaluate_candidate(
            &program,
            &winner,
            &split.test,
            source,
            u64::MAX,
            cfg.objective,
            cfg.workers,
        )?;
        test = Some(SplitReport::from_items(
            record.items.clone(),
            &decl.label_space,
            cfg.objective,
            decl.unsure_policy,
        )?);
        test_evaluation = Some(record);
    }

    let summary = RunSummary {
        winner: winner.candidate_id.clone(),
        value: winner_record.value,
        candidates_evaluated: evaluations.len() as u64,
        search_requests: evaluations.iter().map(|r| r.requests).sum(),
        search_backend_calls: spent,
        test_backend_calls: test_evaluation.as_ref().map_or(0, |r| r.backend_calls),
        stop_reason,
        elapsed_ms: started.elapsed().as_millis() as u64,
        timestamp: now_rfc3339(),
    };
    Ok(CompileOutput {
        winner,
        program,
        candidates,
        runlog: RunLog {
            header,
            evaluations,
            test_evaluation,
            summary,
        },
        validation,
        test,
    })
}
