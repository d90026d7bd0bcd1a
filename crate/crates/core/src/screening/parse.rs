use serde::{Deserialize, Serialize};

use crate::canonical;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("unparseable completion: {reason}")]
    ParseFailure { reason: String },
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub decision: String,
    pub reasoning: String,
    #[serde(serialize_with = "canonical::finite_opt")]
    pub confidence: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Key {
    Decision,
    Reasoning,
    Confidence,
}

/// Splits `Key: value` lines; keys are case-insensitive and may be indented.
fn key_line(line: &str) -> Option<(Key, &str)> {
    let (key, value) = line.trim_start().split_once(':')?;
    let key = match key.trim().to_ascii_lowercase().as_str() {
        "decision" => Key::Decision,
        "reasoning" => Key::Reasoning,
        "confidence" => Key::Confidence,
        _ => return None,
    };
    Some((key, value))
}

/// Extracts decision, reasoning and confidence from a model reply.
///
/// The decision is the first `Decision:` line whose trimmed value equals a
/// label (ignoring ASCII case); the declared spelling is returned.
/// `Reasoning:` runs until the next recognised key. A missing confidence is
/// `None`; a malformed one is a failure.
pub fn parse_completion(text: &str, label_space: &[String]) -> Result<ParsedCompletion, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let keyed: Vec<Option<(Key, &str)>> = lines.iter().map(|l| key_line(l)).collect();

    let mut decision = None;
    let mut rejected = None;
    for (k, v) in keyed.iter().flatten() {
        if *k != Key::Decision {
            continue;
        }
        let value = v.trim();
        match label_space.iter().find(|l| l.eq_ignore_ascii_case(value)) {
            Some(label) => {
                decision = Some(label.clone());
                break;
            }
            None if rejected.is_none() => rejected = Some(value.to_string()),
            None => {}
        }
    }
    let decision = decision.ok_or_else(|| ParseError::ParseFailure {
        reason: match rejected {
            Some(v) => format!("decision {v:?} is not in the label space"),
            None => "no Decision line".into(),
        },
    })?;

    let mut reasoning = String::new();
    if let Some(start) = keyed.iter().position(|k| matches!(k, Some((Key::Reasoning, _)))) {
        let (_, first) = keyed[start].expect("position found a key");
        let mut parts = vec![first.trim_start()];
        parts.extend(
            lines[start + 1..]
                .iter()
                .zip(&keyed[start + 1..])
                .take_while(|(_, k)| k.is_none())
                .map(|(l, _)| *l),
        );
        reasoning = parts.join("\n").trim().to_string();
    }

    let confidence = match keyed.iter().flatten().find(|(k, _)| *k == Key::Confidence) {
        None => None,
        Some((_, raw)) => {
            let raw = raw.trim();
            let value: f64 =
                raw.parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| ParseError::ParseFailure {
                        reason: format!("confidence {raw:?} is not a decimal number"),
                    })?;
            if !(0.0..=1.0).contains(&value) {
                return Err(ParseError::ConfidenceOutOfRange(value));
            }
            Some(value)
        }
    };

    Ok(ParsedCompletion {
        decision,
        reasoning,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        ["Include", "Exclude", "Unsure"].map(String::from).to_vec()
    }

    #[test]
    fn full_reply() {
        let got = parse_completion(
            "Decision: Include\nReasoning: meets all PICOS criteria\nConfidence: 1.0",
            &labels(),
        )
        .unwrap();
        assert_eq!(
            got,
            ParsedCompletion {
                decision: "Include".into(),
                reasoning: "meets all PICOS criteria".into(),
                confidence: Some(1.0),
            }
        );
    }

    #[test]
    fn lowercase_and_optional_fields() {
        let got = parse_completion("decision: exclude", &labels()).unwrap();
        assert_eq!(got.decision, "Exclude");
        assert_eq!(got.reasoning, "");
        assert_eq!(got.confidence, None);
    }

    #[test]
    fn prose_without_decision_fails() {
        assert!(matches!(
            parse_completion("I think this should be included.", &labels()),
            Err(ParseError::ParseFailure { .. })
        ));
    }

    #[test]
    fn label_outside_space_fails() {
        let err = parse_completion("Decision: Maybe", &labels()).unwrap_err();
        assert!(matches!(err, ParseError::ParseFailure { reason } if reason.contains("Maybe")));
    }

    #[test]
    fn first_valid_decision_wins() {
        let got = parse_completion("Decision: perhaps\nDecision: Unsure\nDecision: Include", &labels()).unwrap();
        assert_eq!(got.decision, "Unsure");
    }

    #[test]
    fn multiline_reasoning_stops_at_next_key() {
        let text = "Reasoning: first line\nsecond line\n\nConfidence: 0.4\nDecision: Include\n";
        let got = parse_completion(text, &labels()).unwrap();
        assert_eq!(got.reasoning, "first line\nsecond line");
        assert_eq!(got.confidence, Some(0.4));
    }

    #[test]
    fn confidence_errors() {
        assert_eq!(
            parse_completion("Decision: Include\nConfidence: 1.5", &labels()),
            Err(ParseError::ConfidenceOutOfRange(1.5))
        );
        assert!(matches!(
            parse_completion("Decision: Include\nConfidence: high", &labels()),
            Err(ParseError::ParseFailure { .. })
        ));
        assert!(matches!(
            parse_completion("Decision: Include\nConfidence: NaN", &labels()),
            Err(ParseError::ParseFailure { .. })
        ));
    }
}
