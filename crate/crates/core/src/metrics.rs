//! Classification metrics used as compilation objectives and for reporting.
//!
//! Predictions that could not be parsed are kept in a per-gold-label
//! `unparsed` column: they count toward the total but never toward
//! agreement.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::canonical;
use crate::dataset::GoldExample;
use crate::taskspec::{UnsurePolicy, EXCLUDE, INCLUDE, UNSURE};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("predictions do not match gold ids: {0}")]
    IdMismatch(String),
    #[error("unknown metric {0:?} (expected accuracy, sensitivity, specificity or cohen_kappa)")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Accuracy,
    Sensitivity,
    Specificity,
    CohenKappa,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Accuracy,
        Objective::Sensitivity,
        Objective::Specificity,
        Objective::CohenKappa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Accuracy => "accuracy",
            Objective::Sensitivity => "sensitivity",
            Objective::Specificity => "specificity",
            Objective::CohenKappa => "cohen_kappa",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| MetricsError::UnknownMetric(s.to_string()))
    }
}

/// Rows are gold labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub unparsed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[String]) -> Self {
        let n = labels.len();
        Self {
            labels: labels.to_vec(),
            counts: vec![vec![0; n]; n],
            unparsed: vec![0; n],
        }
    }

    fn index(&self, label: &str) -> Result<usize, MetricsError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))
    }

    /// Records one scored item; `None` marks an unparseable prediction.
    pub fn record(&mut self, gold: &str, pred: Option<&str>) -> Result<(), MetricsError> {
        let g = self.index(gold)?;
        match pred {
            Some(p) => {
                let p = self.index(p)?;
                self.counts[g][p] += 1;
            }
            None => self.unparsed[g] += 1,
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsed.iter().sum::<u64>()
    }

    pub fn agreements(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn count(&self, gold: &str, pred: &str) -> Result<u64, MetricsError> {
        Ok(self.counts[self.index(gold)?][self.index(pred)?])
    }

    fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() + self.unparsed[i]
    }

    fn col_total(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// Binary Include/Exclude reduction. Under `TreatAsInclude` an Unsure
    /// label on either side becomes Include; under `RouteToReview` items
    /// with an Unsure gold or prediction leave the machine-decided set.
    pub fn resolve_unsure(&self, policy: UnsurePolicy) -> Result<ConfusionMatrix, MetricsError> {
        let labels = [INCLUDE.to_string(), EXCLUDE.to_string()];
        let mut out = ConfusionMatrix::new(&labels);
        let map = |label: &str| -> Option<usize> {
            match (label, policy) {
                (INCLUDE, _) | (UNSURE, UnsurePolicy::TreatAsInclude) => Some(0),
                (EXCLUDE, _) => Some(1),
                _ => None,
            }
        };
        for (g, gold) in self.labels.iter().enumerate() {
            if ![INCLUDE, EXCLUDE, UNSURE].contains(&gold.as_str()) {
                return Err(MetricsError::UnknownLabel(gold.clone()));
            }
            let Some(rg) = map(gold) else { continue };
            for (p, pred) in self.labels.iter().enumerate() {
                if let Some(rp) = map(pred) {
                    out.counts[rg][rp] += self.counts[g][p];
                }
            }
            out.unparsed[rg] += self.unparsed[g];
        }
        Ok(out)
    }
}

/// Why a metric fell back to its documented default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFlag {
    ZeroDenominator,
    DegenerateChance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(serialize_with = "canonical::finite")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ScoreFlag>,
}

impl Score {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }

    fn flagged(value: f64, flag: ScoreFlag) -> Self {
        Self {
            value,
            flag: Some(flag),
        }
    }
}

pub fn exact_match(label_space: &[String], gold: &str, pred: &str) -> Result<u8, MetricsError> {
    for label in [gold, pred] {
        if !label_space.iter().any(|l| l == label) {
            return Err(MetricsError::UnknownLabel(label.to_string()));
        }
    }
    Ok(u8::from(gold == pred))
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(cm.agreements() as f64 / total as f64)
}

/// `(TP/(TP+FN), TN/(TN+FP))` treating every label other than `positive` as
/// negative. Unparsed items count as errors on their gold side.
pub fn sensitivity_specificity(cm: &ConfusionMatrix, positive: &str) -> Result<(Score, Score), MetricsError> {
    let pos = cm.index(positive)?;
    let n = cm.labels.len();
    let (mut tp, mut fn_, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for g in 0..n {
        for p in 0..n {
            let c = cm.counts[g][p];
            match (g == pos, p == pos) {
                (true, true) => tp += c,
                (true, false) => fn_ += c,
                (false, true) => fp += c,
                (false, false) => tn += c,
            }
        }
        if g == pos {
            fn_ += cm.unparsed[g];
        } else {
            fp += cm.unparsed[g];
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            Score::flagged(0.0, ScoreFlag::ZeroDenominator)
        } else {
            Score::plain(num as f64 / den as f64)
        }
    };
    Ok((ratio(tp, tp + fn_), ratio(tn, tn + fp)))
}

/// Cohen's kappa from the matrix marginals, evaluated in integer arithmetic
/// as `(N·agree − Σ rᵢcᵢ) / (N² − Σ rᵢcᵢ)`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<Score, MetricsError> {
    let total = cm.total() as u128;
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let agree = cm.agreements() as u128;
    let chance: u128 = (0..cm.labels.len())
        .map(|i| cm.row_total(i) as u128 * cm.col_total(i) as u128)
        .sum();
    let denom = total * total - chance;
    if denom == 0 {
        return Ok(if agree == total {
            Score::flagged(1.0, ScoreFlag::DegenerateChance)
        } else {
            Score::flagged(0.0, ScoreFlag::DegenerateChance)
        });
    }
    let numer = (total * agree) as f64 - chance as f64;
    Ok(Score::plain(numer / denom as f64))
}

/// Value of a registered metric over `cm`. Binary metrics use Include as the
/// positive class after the policy reduction.
pub fn compute(cm: &ConfusionMatrix, objective: Objective, policy: UnsurePolicy) -> Result<Score, MetricsError> {
    match objective {
        Objective::Accuracy => accuracy(cm).map(Score::plain),
        Objective::CohenKappa => cohen_kappa(cm),
        Objective::Sensitivity | Objective::Specificity => {
            if cm.total() == 0 {
                return Err(MetricsError::EmptyMatrix);
            }
            let binary = cm.resolve_unsure(policy)?;
            let (sens, spec) = sensitivity_specificity(&binary, INCLUDE)?;
            Ok(if objective == Objective::Sensitivity {
                sens
            } else {
                spec
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    #[serde(serialize_with = "canonical::finite")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    #[serde(serialize_with = "canonical::finite")]
    pub value: f64,
    pub per_item: Vec<ItemScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ScoreFlag>,
}

/// Scores `preds` against `golds`. Predictions must cover exactly the gold
/// ids; per-item exact-match scores come back in gold order.
pub fn evaluate_batch(
    golds: &[GoldExample],
    preds: &[Prediction],
    label_space: &[String],
    objective: Objective,
    policy: UnsurePolicy,
) -> Result<(MetricResult, ConfusionMatrix), MetricsError> {
    use std::collections::HashMap;

    if preds.len() != golds.len() {
        return Err(MetricsError::IdMismatch(format!(
            "{} predictions for {} gold items",
            preds.len(),
            golds.len()
        )));
    }
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(MetricsError::IdMismatch("duplicate prediction ids".into()));
    }

    let mut cm = ConfusionMatrix::new(label_space);
    let mut per_item = Vec::with_capacity(golds.len());
    for gold in golds {
        let pred = by_id
            .get(gold.id.as_str())
            .ok_or_else(|| MetricsError::IdMismatch(format!("no prediction for {}", gold.id)))?;
        let label = pred.label.as_deref();
        let score = match label {
            Some(l) => exact_match(label_space, &gold.decision, l)?,
            None => 0,
        };
        cm.record(&gold.decision, label)?;
        per_item.push(ItemScore {
            id: gold.id.clone(),
            score: f64::from(score),
        });
    }
    let score = compute(&cm, objective, policy)?;
    Ok((
        MetricResult {
            name: objective.name().to_string(),
            value: score.value,
            per_item,
            flag: score.flag,
        },
        cm,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn labels() -> Vec<String> {
        ["Include", "Exclude", "Unsure"].map(String::from).to_vec()
    }

    fn cm_from(pairs: &[(&str, &str)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(&labels());
        for (g, p) in pairs {
            cm.record(g, Some(p)).unwrap();
        }
        cm
    }

    fn golds(decisions: &[&str]) -> Vec<GoldExample> {
        decisions
            .iter()
            .enumerate()
            .map(|(i, d)| GoldExample {
                id: format!("g{i}"),
                inputs: BTreeMap::from([("abstract".into(), "x".into())]),
                decision: d.to_string(),
                reasoning: None,
            })
            .collect()
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match(&labels(), "Include", "Include"), Ok(1));
        assert_eq!(exact_match(&labels(), "Include", "Exclude"), Ok(0));
        assert_eq!(
            exact_match(&labels(), "Include", "Maybe"),
            Err(MetricsError::UnknownLabel("Maybe".into()))
        );
    }

    #[test]
    fn accuracy_cases() {
        let cm = cm_from(&[("Include", "Include"), ("Exclude", "Exclude"), ("Include", "Exclude")]);
        assert_eq!(accuracy(&cm).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&cm_from(&[("Include", "Include")])).unwrap(), 1.0);
        assert_eq!(accuracy(&cm_from(&[("Include", "Exclude")])).unwrap(), 0.0);
        assert_eq!(
            accuracy(&ConfusionMatrix::new(&labels())),
            Err(MetricsError::EmptyMatrix)
        );
    }

    #[test]
    fn sensitivity_specificity_cases() {
        let cm = cm_from(&[
            ("Include", "Include"),
            ("Include", "Exclude"),
            ("Exclude", "Exclude"),
            ("Exclude", "Exclude"),
        ]);
        let (sens, spec) = sensitivity_specificity(&cm, "Include").unwrap();
        assert_eq!((sens.value, spec.value), (0.5, 1.0));

        let perfect = cm_from(&[("Include", "Include"), ("Exclude", "Exclude")]);
        let (sens, spec) = sensitivity_specificity(&perfect, "Include").unwrap();
        assert_eq!((sens.value, spec.value), (1.0, 1.0));

        let all_pos = cm_from(&[("Include", "Include"), ("Include", "Exclude")]);
        let (_, spec) = sensitivity_specificity(&all_pos, "Include").unwrap();
        assert_eq!(spec, Score::flagged(0.0, ScoreFlag::ZeroDenominator));

        assert!(matches!(
            sensitivity_specificity(&cm, "Maybe"),
            Err(MetricsError::UnknownLabel(_))
        ));
    }

    #[test]
    fn kappa_fixtures() {
        // p_o = 0.5, p_e = 0.5·0.5 + 0.5·0.5 = 0.5 → 0
        let zero = cm_from(&[
            ("Include", "Include"),
            ("Include", "Exclude"),
            ("Exclude", "Include"),
            ("Exclude", "Exclude"),
        ]);
        assert_eq!(cohen_kappa(&zero).unwrap().value, 0.0);
        // p_o = 0, p_e = 0.5 → -1
        let neg = cm_from(&[("Include", "Exclude"), ("Exclude", "Include")]);
        assert_eq!(cohen_kappa(&neg).unwrap().value, -1.0);
        let perfect = cm_from(&[("Include", "Include"), ("Exclude", "Exclude"), ("Unsure", "Unsure")]);
        assert_eq!(cohen_kappa(&perfect).unwrap(), Score::plain(1.0));
    }

    #[test]
    fn kappa_degenerate_chance() {
        let single = cm_from(&[("Include", "Include"), ("Include", "Include")]);
        assert_eq!(
            cohen_kappa(&single).unwrap(),
            Score::flagged(1.0, ScoreFlag::DegenerateChance)
        );
    }

    #[test]
    fn unsure_reduction() {
        let cm = cm_from(&[("Unsure", "Include"), ("Exclude", "Unsure"), ("Include", "Include")]);
        let lenient = cm.resolve_unsure(UnsurePolicy::TreatAsInclude).unwrap();
        assert_eq!(lenient.total(), 3);
        assert_eq!(lenient.count("Include", "Include").unwrap(), 2);
        assert_eq!(lenient.count("Exclude", "Include").unwrap(), 1);
        let routed = cm.resolve_unsure(UnsurePolicy::RouteToReview).unwrap();
        assert_eq!(routed.total(), 1);
    }

    #[test]
    fn evaluate_batch_cases() {
        let g = golds(&["Include", "Exclude", "Unsure"]);
        let preds: Vec<_> = g
            .iter()
            .map(|e| Prediction {
                id: e.id.clone(),
                label: Some(e.decision.clone()),
            })
            .collect();
        let (res, cm) =
            evaluate_batch(&g, &preds, &labels(), Objective::Accuracy, UnsurePolicy::TreatAsInclude).unwrap();
        assert_eq!(res.value, 1.0);
        assert_eq!(
            res.per_item.iter().map(|i| i.score).collect::<Vec<_>>(),
            [1.0, 1.0, 1.0]
        );
        assert_eq!(cm.total(), 3);

        assert!(matches!(
            evaluate_batch(
                &g,
                &preds[..2],
                &labels(),
                Objective::Accuracy,
                UnsurePolicy::TreatAsInclude
            ),
            Err(MetricsError::IdMismatch(_))
        ));

        let g4 = golds(&["Include", "Include", "Exclude", "Exclude"]);
        let p4: Vec<_> = ["Include", "Exclude", "Include", "Exclude"]
            .iter()
            .zip(&g4)
            .map(|(l, e)| Prediction {
                id: e.id.clone(),
                label: Some(l.to_string()),
            })
            .collect();
        let (res, _) =
            evaluate_batch(&g4, &p4, &labels(), Objective::CohenKappa, UnsurePolicy::TreatAsInclude).unwrap();
        assert_eq!(res.value, 0.0);
    }

    #[test]
    fn unparsed_counts_as_error() {
        let g = golds(&["Include", "Exclude", "Include", "Exclude"]);
        let mut preds: Vec<_> = g
            .iter()
            .map(|e| Prediction {
                id: e.id.clone(),
                label: Some(e.decision.clone()),
            })
            .collect();
        preds[2].label = None;
        let (res, cm) =
            evaluate_batch(&g, &preds, &labels(), Objective::Accuracy, UnsurePolicy::TreatAsInclude).unwrap();
        assert_eq!(res.value, 0.75);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.unparsed, [1, 0, 0]);
    }

    #[test]
    fn objective_registry() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert!("aer".parse::<Objective>().is_err());
    }
}
