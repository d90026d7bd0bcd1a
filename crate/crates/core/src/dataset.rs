//! Gold-standard examples: JSONL ingestion, seeded splitting and hashing.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use crate::canonical::{self, CanonicalError};
use crate::rng::{PinnedRng, SPLIT_STREAM};
use crate::taskspec::{TaskDeclaration, CONTEXT_FIELDS};

/// One expert-labelled item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldExample {
    pub id: String,
    pub inputs: BTreeMap<String, String>,
    pub decision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed example: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("example {id}: label {label:?} is not in the label space")]
    UnknownLabel { id: String, label: String },
    #[error("example {id}: missing or empty input field {field:?}")]
    MissingField { id: String, field: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("validation split would be empty")]
    EmptyValSplit,
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Validates one example against the declaration. Context fields may be
/// omitted (the review context supplies them) but must be non-empty if given.
pub fn validate_example(example: &GoldExample, decl: &TaskDeclaration) -> Result<(), DatasetError> {
    for field in decl.record_fields() {
        match example.inputs.get(field) {
            Some(v) if !v.trim().is_empty() => {}
            _ => {
                return Err(DatasetError::MissingField {
                    id: example.id.clone(),
                    field: field.to_string(),
                })
            }
        }
    }
    for field in CONTEXT_FIELDS {
        if let Some(v) = example.inputs.get(field) {
            if v.trim().is_empty() {
                return Err(DatasetError::MissingField {
                    id: example.id.clone(),
                    field: field.to_string(),
                });
            }
        }
    }
    if !decl.has_label(&example.decision) {
        return Err(DatasetError::UnknownLabel {
            id: example.id.clone(),
            label: example.decision.clone(),
        });
    }
    Ok(())
}

/// Reads a JSONL gold set in file order. Blank lines are skipped.
pub fn parse_dataset(path: &Path, decl: &TaskDeclaration) -> Result<Vec<GoldExample>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(std::io::BufReader::new(file), decl)
}

pub fn read_dataset<R: BufRead>(reader: R, decl: &TaskDeclaration) -> Result<Vec<GoldExample>, DatasetError> {
    let mut examples = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DatasetError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let example: GoldExample = serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if example.id.trim().is_empty() {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                reason: "empty id".into(),
            });
        }
        validate_example(&example, decl)?;
        if !ids.insert(example.id.clone()) {
            return Err(DatasetError::DuplicateId(example.id));
        }
        examples.push(example);
    }
    Ok(examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    #[serde(serialize_with = "canonical::finite")]
    pub train: f64,
    #[serde(serialize_with = "canonical::finite")]
    pub val: f64,
    #[serde(serialize_with = "canonical::finite")]
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    /// Largest-remainder apportionment of `n` items; remainder ties go to
    /// train, then val, then test.
    pub fn apportion(&self, n: usize) -> Result<[usize; 3], DatasetError> {
        let fr = self.as_array();
        let sum: f64 = fr.iter().sum();
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidFractions((self.train, self.val, self.test)));
        }
        let quotas = fr.map(|f| f * n as f64);
        // The epsilon absorbs products like 0.6 * 10 landing just below 6.
        let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
        let mut assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut k = 0;
        while assigned < n {
            let slot = order[k % 3];
            if fr[slot] > 0.0 {
                counts[slot] += 1;
                assigned += 1;
            }
            k += 1;
        }
        while assigned > n {
            // Only reachable through the epsilon above; trim the largest share.
            let slot = (0..3).max_by_key(|&i| counts[i]).expect("three slots");
            counts[slot] -= 1;
            assigned -= 1;
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<GoldExample>,
    pub val: Vec<GoldExample>,
    pub test: Vec<GoldExample>,
}

impl DatasetSplit {
    pub fn ids(list: &[GoldExample]) -> Vec<String> {
        list.iter().map(|e| e.id.clone()).collect()
    }

    /// Labels that appear nowhere in the split. Empty when every outcome is
    /// represented or when the dataset is smaller than the label space.
    pub fn missing_labels(&self, decl: &TaskDeclaration) -> Vec<String> {
        let total = self.train.len() + self.val.len() + self.test.len();
        if total < decl.label_space.len() {
            return Vec::new();
        }
        let present: BTreeSet<&str> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|e| e.decision.as_str())
            .collect();
        decl.label_space
            .iter()
            .filter(|l| !present.contains(l.as_str()))
            .cloned()
            .collect()
    }
}

/// Sorts by id, shuffles with the pinned generator, then slices
/// train | val | test contiguously.
pub fn split_dataset(
    examples: &[GoldExample],
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let [n_train, n_val, _] = fractions.apportion(examples.len())?;
    if n_val == 0 {
        return Err(DatasetError::EmptyValSplit);
    }
    let mut ordered: Vec<&GoldExample> = examples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = ordered.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DatasetError::DuplicateId(w[0].id.clone()));
    }
    PinnedRng::new(seed, SPLIT_STREAM).shuffle(&mut ordered);

    let mut rest = ordered.into_iter().cloned();
    let train: Vec<_> = rest.by_ref().take(n_train).collect();
    let val: Vec<_> = rest.by_ref().take(n_val).collect();
    let test: Vec<_> = rest.collect();
    Ok(DatasetSplit { train, val, test })
}

/// SHA-256 over the canonical encodings of all examples, concatenated in id order.
pub fn dataset_hash(examples: &[GoldExample]) -> Result<String, DatasetError> {
    let mut ordered: Vec<&GoldExample> = examples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = ordered.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DatasetError::DuplicateId(w[0].id.clone()));
    }
    let mut pre_image = Vec::new();
    for example in ordered {
        pre_image.extend(canonical::canonicalize(example)?);
    }
    Ok(canonical::sha256_hex(&pre_image))
}
