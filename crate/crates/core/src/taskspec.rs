//! Declarative task definition: input schema, label space, Unsure policy,
//! review context and pinned decoding parameters.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::canonical::{self, CanonicalError};

/// Labels of the screening task, in declaration order.
pub const SCREENING_LABELS: [&str; 3] = ["Include", "Exclude", "Unsure"];
pub const INCLUDE: &str = "Include";
pub const EXCLUDE: &str = "Exclude";
pub const UNSURE: &str = "Unsure";

/// Input fields supplied by the [`ContextSpec`] rather than by each record.
pub const CONTEXT_FIELDS: [&str; 3] = ["criteria", "study_aims", "research_question"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsurePolicy {
    TreatAsInclude,
    RouteToReview,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDeclaration {
    pub name: String,
    pub version: String,
    pub input_fields: Vec<String>,
    pub label_space: Vec<String>,
    pub unsure_policy: UnsurePolicy,
}

impl TaskDeclaration {
    /// The abstract screening signature: three context inputs
    /// plus the abstract, labels Include/Exclude/Unsure.
    pub fn screening(unsure_policy: UnsurePolicy) -> Self {
        Self {
            name: "screen_abstract".into(),
            version: "1".into(),
            input_fields: ["criteria", "study_aims", "research_question", "abstract"]
                .map(String::from)
                .to_vec(),
            label_space: SCREENING_LABELS.map(String::from).to_vec(),
            unsure_policy,
        }
    }

    /// Declared input fields that each record must carry (context fields excluded).
    pub fn record_fields(&self) -> impl Iterator<Item = &str> {
        self.input_fields
            .iter()
            .map(String::as_str)
            .filter(|f| !CONTEXT_FIELDS.contains(f))
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.label_space.iter().any(|l| l == label)
    }

    /// Case-insensitive lookup returning the declared spelling.
    pub fn match_label(&self, candidate: &str) -> Option<&str> {
        self.label_space
            .iter()
            .find(|l| l.eq_ignore_ascii_case(candidate))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub criteria: String,
    pub study_aims: String,
    pub research_question: String,
    pub version: String,
}

impl ContextSpec {
    pub fn field(&self, name: &str) -> Option<&str> {
        match name {
            "criteria" => Some(&self.criteria),
            "study_aims" => Some(&self.study_aims),
            "research_question" => Some(&self.research_question),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(serialize_with = "canonical::finite")]
    pub temperature: f64,
    #[serde(serialize_with = "canonical::finite")]
    pub top_p: f64,
    pub seed: u64,
    pub max_tokens: u32,
    pub model_id: String,
}

impl DecodingParams {
    /// Pinned decoding used for compilation runs.
    pub fn pinned(model_id: impl Into<String>) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            seed: 42,
            max_tokens: 1024,
            model_id: model_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.findings.push(Finding {
            field: field.into(),
            reason: reason.into(),
        });
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.findings.extend(other.findings);
    }
}

/// Checks every [`TaskDeclaration`] invariant; at most one finding per field.
pub fn validate_declaration(decl: &TaskDeclaration) -> ValidationReport {
    let mut report = ValidationReport::default();
    if decl.name.trim().is_empty() {
        report.push("name", "must be non-empty");
    }
    if decl.version.trim().is_empty() {
        report.push("version", "must be non-empty");
    }

    if decl.input_fields.is_empty() {
        report.push("input_fields", "must declare at least one field");
    } else if decl.input_fields.iter().any(|f| f.trim().is_empty()) {
        report.push("input_fields", "field names must be non-empty");
    } else if let Some(dup) = first_duplicate(&decl.input_fields) {
        report.push("input_fields", format!("duplicate field name {dup:?}"));
    } else if decl.record_fields().next().is_none() {
        report.push(
            "input_fields",
            "must declare at least one per-record field besides the context fields",
        );
    }

    if decl.label_space.len() < 2 {
        report.push("label_space", "needs at least 2 labels");
    } else if let Some(dup) = first_duplicate(&decl.label_space) {
        report.push("label_space", format!("duplicate label {dup:?}"));
    } else if decl.label_space.iter().map(String::as_str).ne(SCREENING_LABELS) {
        report.push(
            "label_space",
            format!("screening tasks use exactly {SCREENING_LABELS:?}"),
        );
    }
    report
}

pub fn validate_context(ctx: &ContextSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (name, value) in [
        ("context.criteria", &ctx.criteria),
        ("context.study_aims", &ctx.study_aims),
        ("context.research_question", &ctx.research_question),
        ("context.version", &ctx.version),
    ] {
        if value.trim().is_empty() {
            report.push(name, "must be non-empty");
        }
    }
    report
}

pub fn validate_params(params: &DecodingParams, for_compilation: bool) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !params.temperature.is_finite() || params.temperature < 0.0 {
        report.push("decoding.temperature", "must be a finite real >= 0");
    } else if for_compilation && params.temperature != 0.0 {
        report.push("decoding.temperature", "compilation requires temperature 0");
    }
    if !(params.top_p > 0.0 && params.top_p <= 1.0) {
        report.push("decoding.top_p", "must lie in (0, 1]");
    }
    if params.max_tokens == 0 {
        report.push("decoding.max_tokens", "must be positive");
    }
    if params.model_id.trim().is_empty() {
        report.push("decoding.model_id", "must be non-empty");
    }
    report
}

fn first_duplicate(items: &[String]) -> Option<&str> {
    let mut seen = BTreeSet::new();
    items
        .iter()
        .find(|item| !seen.insert(item.as_str()))
        .map(String::as_str)
}

pub fn context_hash(ctx: &ContextSpec) -> Result<String, CanonicalError> {
    canonical::content_hash(ctx)
}

#[derive(Debug, thiserror::Error)]
pub enum TaskSpecError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(
        "context version {version:?} is pinned to hash {pinned} but its content hashes to {actual}; bump the version"
    )]
    ContextHashMismatch {
        version: String,
        pinned: String,
        actual: String,
    },
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Parsed `task.yaml`: the declaration plus the versioned review context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFile {
    pub task: TaskDeclaration,
    pub context: ContextSpec,
}

const TASK_FILE_KEYS: &[&str] = &["task", "context"];
const TASK_KEYS: &[&str] = &["name", "version", "input_fields", "label_space", "unsure_policy"];
const CONTEXT_KEYS: &[&str] = &["criteria", "study_aims", "research_question", "version", "pinned_hash"];

/// Reads `task.yaml` (YAML or JSON). Unknown keys and invariant violations
/// come back as findings; only unreadable or structurally incomplete files
/// are errors.
pub fn load_task_file(path: &Path) -> Result<(TaskFile, ValidationReport), TaskSpecError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaskSpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_task_file(&text).map_err(|e| match e {
        TaskSpecError::Parse { reason, .. } => TaskSpecError::Parse {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

pub fn parse_task_file(text: &str) -> Result<(TaskFile, ValidationReport), TaskSpecError> {
    let parse_err = |reason: String| TaskSpecError::Parse {
        path: "<task>".into(),
        reason,
    };
    let mut root: Value = serde_yaml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let mut report = ValidationReport::default();
    unknown_keys(&root, "", TASK_FILE_KEYS, &mut report);
    unknown_keys(&root["task"], "task.", TASK_KEYS, &mut report);
    unknown_keys(&root["context"], "context.", CONTEXT_KEYS, &mut report);

    let pinned = root
        .get_mut("context")
        .and_then(Value::as_object_mut)
        .and_then(|c| c.remove("pinned_hash"));

    let task: TaskDeclaration = take_section(&mut root, "task").map_err(parse_err)?;
    let context: ContextSpec = take_section(&mut root, "context").map_err(parse_err)?;

    if let Some(pinned) = pinned {
        let pinned = pinned
            .as_str()
            .ok_or_else(|| parse_err("context.pinned_hash must be a string".into()))?
            .to_ascii_lowercase();
        let actual = context_hash(&context)?;
        if pinned != actual {
            return Err(TaskSpecError::ContextHashMismatch {
                version: context.version.clone(),
                pinned,
                actual,
            });
        }
    }

    report.extend(validate_declaration(&task));
    report.extend(validate_context(&context));
    Ok((TaskFile { task, context }, report))
}

fn take_section<T: serde::de::DeserializeOwned>(root: &mut Value, key: &str) -> Result<T, String> {
    let mut section = root
        .get_mut(key)
        .map(Value::take)
        .ok_or_else(|| format!("missing section `{key}`"))?;
    // Unknown keys were already reported as findings.
    let allowed: &[&str] = if key == "task" { TASK_KEYS } else { CONTEXT_KEYS };
    if let Value::Object(map) = &mut section {
        map.retain(|k, _| allowed.contains(&k.as_str()));
    }
    serde_json::from_value(section).map_err(|e| format!("section `{key}`: {e}"))
}

fn unknown_keys(value: &Value, prefix: &str, allowed: &[&str], report: &mut ValidationReport) {
    if let Value::Object(map) = value {
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                report.push(format!("{prefix}{key}"), "unknown key");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx() -> ContextSpec {
        ContextSpec {
            criteria: "Population: adults 18-65 with major depressive disorder. \
                       Intervention: digital CBT via app or web. \
                       Design: RCTs or non-inferiority trials. \
                       Outcome: validated depressive symptom scale."
                .into(),
            study_aims: "To determine if digital CBT reduces depressive symptoms in adults with MDD.".into(),
            research_question: "In adults aged 18-65 with MDD, does digital CBT, compared with usual care, \
                                reduce depressive symptoms measured using validated scales?"
                .into(),
            version: "2024-01".into(),
        }
    }

    #[test]
    fn screening_signature_has_no_findings() {
        let decl = TaskDeclaration::screening(UnsurePolicy::TreatAsInclude);
        assert!(validate_declaration(&decl).is_ok());
        assert_eq!(decl.record_fields().collect::<Vec<_>>(), ["abstract"]);
    }

    #[test]
    fn empty_label_space_is_one_finding() {
        let mut decl = TaskDeclaration::screening(UnsurePolicy::RouteToReview);
        decl.label_space.clear();
        let report = validate_declaration(&decl);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].field, "label_space");
    }

    #[test]
    fn duplicate_input_field_is_one_finding() {
        let mut decl = TaskDeclaration::screening(UnsurePolicy::RouteToReview);
        decl.input_fields.push("abstract".into());
        let report = validate_declaration(&decl);
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].field, "input_fields");
        assert!(report.findings[0].reason.contains("abstract"));
    }

    #[test]
    fn context_only_fields_rejected() {
        let mut decl = TaskDeclaration::screening(UnsurePolicy::RouteToReview);
        decl.input_fields.retain(|f| f != "abstract");
        assert_eq!(validate_declaration(&decl).findings.len(), 1);
    }

    #[test]
    fn canonical_bytes_are_deterministic() {
        let a = canonical::canonicalize(&ctx()).unwrap();
        let b = canonical::canonicalize(&ctx()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn source_field_order_does_not_matter() {
        let one = r#"{"name":"t","version":"1","input_fields":["abstract"],"label_space":["Include","Exclude","Unsure"],"unsure_policy":"treat_as_include"}"#;
        let two = r#"{"unsure_policy":"treat_as_include","label_space":["Include","Exclude","Unsure"],"input_fields":["abstract"],"version":"1","name":"t"}"#;
        let a: TaskDeclaration = serde_json::from_str(one).unwrap();
        let b: TaskDeclaration = serde_json::from_str(two).unwrap();
        assert_eq!(
            canonical::canonicalize(&a).unwrap(),
            canonical::canonicalize(&b).unwrap()
        );
    }

    #[test]
    fn nan_temperature_is_non_finite_error() {
        let mut p = DecodingParams::pinned("m");
        p.temperature = f64::NAN;
        assert!(matches!(
            canonical::canonicalize(&p),
            Err(CanonicalError::NonFiniteNumber(_))
        ));
    }

    #[test]
    fn context_hash_format_and_sensitivity() {
        let h = context_hash(&ctx()).unwrap();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        let mut changed = ctx();
        changed.criteria.replace_range(0..1, "p");
        assert_ne!(h, context_hash(&changed).unwrap());
    }

    #[test]
    fn context_hash_fixture_is_pinned() {
        // Reference value: `sha256sum` over the canonical bytes printed below.
        let fixture = ContextSpec {
            criteria: "PICOS".into(),
            study_aims: "aims".into(),
            research_question: "question?".into(),
            version: "1".into(),
        };
        let bytes = canonical::canonicalize(&fixture).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"criteria":"PICOS","research_question":"question?","study_aims":"aims","version":"1"}"#
        );
        assert_eq!(
            context_hash(&fixture).unwrap(),
            "c733d18875227ec49fe1364c96e01d322235f2fe5dcd492beca7863364a563cf"
        );
    }

    #[test]
    fn compile_requires_zero_temperature() {
        let mut p = DecodingParams::pinned("m");
        assert!(validate_params(&p, true).is_ok());
        p.temperature = 0.2;
        assert!(validate_params(&p, false).is_ok());
        assert_eq!(validate_params(&p, true).findings.len(), 1);
    }

    #[test]
    fn task_file_unknown_keys_are_findings() {
        let text = r#"
task:
  name: screen
  version: "1"
  input_fields: [abstract]
  label_space: [Include, Exclude, Unsure]
  unsure_policy: route_to_review
  colour: blue
context:
  criteria: c
  study_aims: a
  research_question: q
  version: v1
extra: 1
"#;
        let (file, report) = parse_task_file(text).unwrap();
        assert_eq!(file.task.unsure_policy, UnsurePolicy::RouteToReview);
        let fields: Vec<_> = report.findings.iter().map(|f| f.field.as_str()).collect();
        assert_eq!(fields, ["extra", "task.colour"]);
    }

    #[test]
    fn pinned_context_hash_mismatch_is_error() {
        let text = r#"
task: {name: s, version: "1", input_fields: [abstract], label_space: [Include, Exclude, Unsure], unsure_policy: treat_as_include}
context: {criteria: c, study_aims: a, research_question: q, version: v1, pinned_hash: "00"}
"#;
        assert!(matches!(
            parse_task_file(text),
            Err(TaskSpecError::ContextHashMismatch { .. })
        ));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 ,.\\-\n]{0,40}"
    }

    proptest! {
        #[test]
        fn decl_round_trip(name in arb_text(), fields in prop::collection::vec(arb_text(), 0..5),
                           labels in prop::collection::vec(arb_text(), 0..4), route in any::<bool>()) {
            let decl = TaskDeclaration {
                name, version: "1".into(), input_fields: fields, label_space: labels,
                unsure_policy: if route { UnsurePolicy::RouteToReview } else { UnsurePolicy::TreatAsInclude },
            };
            let bytes = canonical::canonicalize(&decl).unwrap();
            let back: TaskDeclaration = serde_json::from_slice(&bytes).unwrap();
            prop_assert_eq!(back, decl);
        }

        #[test]
        fn context_round_trip(c in arb_text(), a in arb_text(), q in arb_text(), v in arb_text()) {
            let ctx = ContextSpec { criteria: c, study_aims: a, research_question: q, version: v };
            let back: ContextSpec = serde_json::from_slice(&canonical::canonicalize(&ctx).unwrap()).unwrap();
            prop_assert_eq!(back, ctx);
        }

        #[test]
        fn params_round_trip(t in 0.0f64..2.0, p in 0.0001f64..=1.0, seed in any::<u64>(),
                             max in 1u32..100_000, model in "[a-z0-9/\\-]{1,20}") {
            let params = DecodingParams { temperature: t, top_p: p, seed, max_tokens: max, model_id: model };
            let back: DecodingParams = serde_json::from_slice(&canonical::canonicalize(&params).unwrap()).unwrap();
            prop_assert_eq!(back, params);
        }
    }
}
