//! Inference with a compiled program: prompt rendering, reply parsing,
//! the Unsure policy and PRISMA screening counts.

mod parse;
mod render;

pub use parse::{parse_completion, ParseError, ParsedCompletion};
pub use render::{render_prompt, render_target};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::backend::{BackendError, CompletionSource};
use crate::canonical;
use crate::dataset::GoldExample;
use crate::parallel::ordered_map;
use crate::taskspec::{ContextSpec, DecodingParams, TaskDeclaration, UnsurePolicy, EXCLUDE, INCLUDE, UNSURE};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ScreeningError {
    #[error("record {id}: missing or empty input field {field:?}")]
    MissingField { id: String, field: String },
}

/// Everything needed to screen a record: the declaration, the review
/// context, the chosen instruction, exemplars (id order) and decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningProgram {
    pub declaration: TaskDeclaration,
    pub context: ContextSpec,
    pub instruction: String,
    pub exemplars: Vec<GoldExample>,
    pub params: DecodingParams,
}

impl ScreeningProgram {
    pub fn new(
        declaration: TaskDeclaration,
        context: ContextSpec,
        instruction: impl Into<String>,
        mut exemplars: Vec<GoldExample>,
        params: DecodingParams,
    ) -> Self {
        exemplars.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            declaration,
            context,
            instruction: instruction.into(),
            exemplars,
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractRecord {
    pub id: String,
    pub inputs: BTreeMap<String, String>,
}

impl AbstractRecord {
    pub fn validate(&self, decl: &TaskDeclaration) -> Result<(), ScreeningError> {
        for field in decl.record_fields() {
            if self.inputs.get(field).is_none_or(|v| v.trim().is_empty()) {
                return Err(ScreeningError::MissingField {
                    id: self.id.clone(),
                    field: field.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl From<&GoldExample> for AbstractRecord {
    fn from(example: &GoldExample) -> Self {
        Self {
            id: example.id.clone(),
            inputs: example.inputs.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Included,
    Excluded,
    ReviewQueue,
}

/// Maps a parsed decision (`None` for a parse failure) to its screening
/// outcome. Failures always go to human review.
pub fn apply_unsure_policy(decision: Option<&str>, policy: UnsurePolicy) -> Resolution {
    match decision {
        Some(INCLUDE) => Resolution::Included,
        Some(EXCLUDE) => Resolution::Excluded,
        Some(UNSURE) => match policy {
            UnsurePolicy::TreatAsInclude => Resolution::Included,
            UnsurePolicy::RouteToReview => Resolution::ReviewQueue,
        },
        _ => Resolution::ReviewQueue,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOutcome {
    pub id: String,
    pub raw_text: String,
    pub decision: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub reasoning: String,
    #[serde(serialize_with = "canonical::finite_opt")]
    pub confidence: Option<f64>,
    pub resolved: Resolution,
}

impl ScreeningOutcome {
    pub fn from_reply(id: &str, raw_text: String, label_space: &[String], policy: UnsurePolicy) -> Self {
        match parse_completion(&raw_text, label_space) {
            Ok(parsed) => Self {
                id: id.to_string(),
                resolved: apply_unsure_policy(Some(&parsed.decision), policy),
                decision: Some(parsed.decision),
                failure: None,
                reasoning: parsed.reasoning,
                confidence: parsed.confidence,
                raw_text,
            },
            Err(e) => Self::failed(id, raw_text, e.to_string()),
        }
    }

    pub fn failed(id: &str, raw_text: String, reason: String) -> Self {
        Self {
            id: id.to_string(),
            raw_text,
            decision: None,
            failure: Some(reason),
            reasoning: String::new(),
            confidence: None,
            resolved: Resolution::ReviewQueue,
        }
    }
}

/// Pre-policy decision counts plus post-policy routing.
///
/// `screened == include_decisions + exclude_decisions + unsure + parse_failures`
/// and `screened == included + excluded + review_queue`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrismaCounts {
    pub screened: u64,
    pub include_decisions: u64,
    pub exclude_decisions: u64,
    pub unsure: u64,
    pub parse_failures: u64,
    pub included: u64,
    pub excluded: u64,
    pub review_queue: u64,
}

impl PrismaCounts {
    pub fn add(&mut self, outcome: &ScreeningOutcome) {
        self.screened += 1;
        match outcome.decision.as_deref() {
            Some(INCLUDE) => self.include_decisions += 1,
            Some(EXCLUDE) => self.exclude_decisions += 1,
            Some(UNSURE) => self.unsure += 1,
            _ => self.parse_failures += 1,
        }
        match outcome.resolved {
            Resolution::Included => self.included += 1,
            Resolution::Excluded => self.excluded += 1,
            Resolution::ReviewQueue => self.review_queue += 1,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.screened == self.include_decisions + self.exclude_decisions + self.unsure + self.parse_failures
            && self.screened == self.included + self.excluded + self.review_queue
    }
}

/// Screens one record. Backend failures become failed outcomes carrying the
/// error text so the batch keeps going.
pub fn screen_one(
    program: &ScreeningProgram,
    record: &AbstractRecord,
    source: CompletionSource<'_>,
) -> Result<ScreeningOutcome, ScreeningError> {
    let request = render_prompt(program, record)?;
    let decl = &program.declaration;
    Ok(match source.complete(&request) {
        Ok(c) => ScreeningOutcome::from_reply(&record.id, c.text, &decl.label_space, decl.unsure_policy),
        Err(e) => ScreeningOutcome::failed(&record.id, String::new(), backend_failure(&e)),
    })
}

fn backend_failure(e: &BackendError) -> String {
    format!("backend error: {e}")
}

/// Screens `records` on up to `workers` threads. Outcomes keep input order.
pub fn screen_batch(
    program: &ScreeningProgram,
    records: &[AbstractRecord],
    source: CompletionSource<'_>,
    workers: usize,
) -> Result<(Vec<ScreeningOutcome>, PrismaCounts), ScreeningError> {
    for record in records {
        record.validate(&program.declaration)?;
    }
    let outcomes = ordered_map(workers, records, |r| screen_one(program, r, source))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts = PrismaCounts::default();
    for outcome in &outcomes {
        counts.add(outcome);
    }
    Ok((outcomes, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{request_key, ScriptRule, ScriptedBackend};

    fn program(exemplars: Vec<GoldExample>) -> ScreeningProgram {
        ScreeningProgram::new(
            TaskDeclaration::screening(UnsurePolicy::TreatAsInclude),
            ContextSpec {
                criteria: "Population: adults with MDD".into(),
                study_aims: "aims".into(),
                research_question: "question".into(),
                version: "1".into(),
            },
            "Screen using the PICOS criteria.",
            exemplars,
            DecodingParams::pinned("m"),
        )
    }

    fn record(id: &str, text: &str) -> AbstractRecord {
        AbstractRecord {
            id: id.into(),
            inputs: BTreeMap::from([("abstract".into(), text.into())]),
        }
    }

    fn gold(id: &str, decision: &str) -> GoldExample {
        GoldExample {
            id: id.into(),
            inputs: BTreeMap::from([("abstract".into(), format!("text of {id}"))]),
            decision: decision.into(),
            reasoning: Some(format!("why {id}")),
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = program(vec![gold("b", "Exclude"), gold("a", "Include")]);
        let r = record("x", "An RCT of app CBT.");
        assert_eq!(render_prompt(&p, &r).unwrap(), render_prompt(&p, &r).unwrap());
        let text = render_prompt(&p, &r).unwrap().user_text;
        // exemplars in id order regardless of construction order
        assert!(text.find("text of a").unwrap() < text.find("text of b").unwrap());
    }

    #[test]
    fn no_exemplars_no_example_block() {
        let req = render_prompt(&program(vec![]), &record("x", "abc")).unwrap();
        assert!(!req.user_text.contains("## Examples"));
        assert!(!req.user_text.contains("Decision: Include"));
        assert_eq!(req.system_text, "Screen using the PICOS criteria.");
        assert!(req.user_text.ends_with(
            "Decision: <Include | Exclude | Unsure>\nReasoning: <brief justification referencing the criteria>\nConfidence: <number between 0.0 and 1.0>\n"
        ));
    }

    #[test]
    fn missing_abstract_rejected() {
        let r = AbstractRecord {
            id: "x".into(),
            inputs: BTreeMap::from([("title".into(), "t".into())]),
        };
        assert_eq!(
            render_prompt(&program(vec![]), &r),
            Err(ScreeningError::MissingField {
                id: "x".into(),
                field: "abstract".into()
            })
        );
    }

    #[test]
    fn multiline_values_cannot_collide() {
        let p = program(vec![]);
        let a = record("x", "line one\nabstract: forged");
        let b = record("x", "line one");
        assert_ne!(
            request_key(&render_prompt(&p, &a).unwrap()).unwrap(),
            request_key(&render_prompt(&p, &b).unwrap()).unwrap()
        );
    }

    #[test]
    fn rendered_targets_parse_back() {
        let labels = TaskDeclaration::screening(UnsurePolicy::TreatAsInclude).label_space;
        for d in ["Include", "Exclude", "Unsure"] {
            let parsed = parse_completion(&render_target(&gold("g", d)), &labels).unwrap();
            assert_eq!(parsed.decision, d);
            assert_eq!(parsed.reasoning, "why g");
        }
    }

    #[test]
    fn policy_table() {
        use Resolution::*;
        use UnsurePolicy::*;
        assert_eq!(apply_unsure_policy(Some("Unsure"), TreatAsInclude), Included);
        assert_eq!(apply_unsure_policy(Some("Unsure"), RouteToReview), ReviewQueue);
        assert_eq!(apply_unsure_policy(None, TreatAsInclude), ReviewQueue);
        assert_eq!(apply_unsure_policy(Some("Include"), RouteToReview), Included);
        assert_eq!(apply_unsure_policy(Some("Exclude"), TreatAsInclude), Excluded);
    }

    #[test]
    fn batch_counts() {
        let backend = ScriptedBackend::new(
            vec![
                ScriptRule::contains("INC", "Decision: Include"),
                ScriptRule::contains("EXC", "Decision: Exclude\nConfidence: 0.9"),
                ScriptRule::contains("UNS", "Decision: Unsure"),
            ],
            None,
        );
        let mut records = Vec::new();
        for i in 0..4 {
            records.push(record(&format!("i{i}"), &format!("INC {i}")));
        }
        for i in 0..5 {
            records.push(record(&format!("e{i}"), &format!("EXC {i}")));
        }
        records.push(record("u", "UNS"));
        let (outcomes, counts) =
            screen_batch(&program(vec![]), &records, CompletionSource::Direct(&backend), 3).unwrap();
        assert_eq!(
            outcomes.iter().map(|o| o.id.as_str()).collect::<Vec<_>>(),
            records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>()
        );
        assert_eq!(counts.screened, 10);
        assert_eq!(counts.included, 5);
        assert_eq!(counts.review_queue, 0);
        assert!(counts.is_conserved());
        assert_eq!(outcomes[4].confidence, Some(0.9));
    }

    #[test]
    fn backend_errors_become_failed_outcomes() {
        let backend = ScriptedBackend::new(vec![], None);
        let (outcomes, counts) = screen_batch(
            &program(vec![]),
            &[record("a", "x")],
            CompletionSource::Direct(&backend),
            1,
        )
        .unwrap();
        assert_eq!(counts.parse_failures, 1);
        assert_eq!(counts.review_queue, 1);
        assert!(outcomes[0].failure.as_deref().unwrap().contains("no scripted rule"));
    }

    #[test]
    fn empty_batch_is_all_zero() {
        let backend = ScriptedBackend::default();
        let (outcomes, counts) = screen_batch(&program(vec![]), &[], CompletionSource::Direct(&backend), 2).unwrap();
        assert!(outcomes.is_empty());
        assert_eq!(counts, PrismaCounts::default());
    }
}
