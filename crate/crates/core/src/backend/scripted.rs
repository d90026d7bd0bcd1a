use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{request_key, Backend, BackendError, Completion, PromptRequest};

/// How a scripted rule recognises a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    /// Every listed substring occurs in the system text or the user text.
    Contains(Vec<String>),
    /// Exact request key.
    RequestKey(String),
}

impl Matcher {
    fn matches(&self, req: &PromptRequest, key: &str) -> bool {
        match self {
            Matcher::Contains(parts) => parts
                .iter()
                .all(|p| req.system_text.contains(p.as_str()) || req.user_text.contains(p.as_str())),
            Matcher::RequestKey(k) => k.eq_ignore_ascii_case(key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub response: String,
}

impl ScriptRule {
    pub fn contains(part: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: Matcher::Contains(vec![part.into()]),
            response: response.into(),
        }
    }

    pub fn contains_all<I, S>(parts: I, response: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            matcher: Matcher::Contains(parts.into_iter().map(Into::into).collect()),
            response: response.into(),
        }
    }
}

/// Deterministic stand-in model: the first matching rule answers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedBackend {
    pub rules: Vec<ScriptRule>,
    pub default: Option<String>,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(default)]
    contains: Option<OneOrMany>,
    #[serde(default)]
    request_key: Option<String>,
    response: String,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default)]
    rules: Vec<RawRule>,
    #[serde(default)]
    default: Option<String>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, default: Option<String>) -> Self {
        Self { rules, default }
    }

    /// Parses a YAML/JSON script:
    ///
    /// ```yaml
    /// rules:
    ///   - contains: [PICOS criteria, "ABS-001"]
    ///     response: "Decision: Include"
    ///   - request_key: 3f2a...
    ///     response: "Decision: Exclude"
    /// default: "Decision: Unsure"
    /// ```
    pub fn from_script(text: &str) -> Result<Self, BackendError> {
        let raw: RawScript = serde_yaml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))?;
        let mut rules = Vec::with_capacity(raw.rules.len());
        for (i, r) in raw.rules.into_iter().enumerate() {
            let matcher = match (r.contains, r.request_key) {
                (Some(OneOrMany::One(s)), None) => Matcher::Contains(vec![s]),
                (Some(OneOrMany::Many(v)), None) if !v.is_empty() => Matcher::Contains(v),
                (None, Some(k)) => Matcher::RequestKey(k),
                _ => {
                    return Err(BackendError::Config(format!(
                        "rule {i}: exactly one of `contains` (non-empty) or `request_key` is required"
                    )))
                }
            };
            rules.push(ScriptRule {
                matcher,
                response: r.response,
            });
        }
        Ok(Self::new(rules, raw.default))
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_script(&text)
    }

    pub fn to_script(&self) -> String {
        let raw = RawScript {
            rules: self
                .rules
                .iter()
                .map(|r| match &r.matcher {
                    Matcher::Contains(v) => RawRule {
                        contains: Some(OneOrMany::Many(v.clone())),
                        request_key: None,
                        response: r.response.clone(),
                    },
                    Matcher::RequestKey(k) => RawRule {
                        contains: None,
                        request_key: Some(k.clone()),
                        response: r.response.clone(),
                    },
                })
                .collect(),
            default: self.default.clone(),
        };
        serde_yaml::to_string(&raw).expect("script serializes")
    }
}

impl Backend for ScriptedBackend {
    fn kind(&self) -> &'static str {
        "scripted"
    }

    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        let key = request_key(req)?;
        let text = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(req, &key))
            .map(|r| r.response.clone())
            .or_else(|| self.default.clone())
            .ok_or(BackendError::NoRuleMatched { key })?;
        Ok(Completion {
            text,
            backend_id: self.backend_id(req),
            cached: false,
        })
    }
}
