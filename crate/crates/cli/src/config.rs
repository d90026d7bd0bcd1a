//! Run configuration: a YAML file whose values command-line flags override.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use slrc_core::backend::{Backend, HttpBackend, HttpConfig, ScriptedBackend};
use slrc_core::compiler::{SearchConfig, Strategy};
use slrc_core::dataset::SplitFractions;
use slrc_core::metrics::Objective;
use slrc_core::taskspec::DecodingParams;

use crate::CliError;

pub const DEFAULT_API_KEY_ENV: &str = "SLRC_API_KEY";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: Option<f64>,
    pub val: Option<f64>,
    pub test: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSection {
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// `scripted` or `http`.
    pub kind: Option<String>,
    pub script: Option<String>,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub strategy: Option<Strategy>,
    pub budget: Option<u64>,
    pub max_exemplars: Option<usize>,
    pub seed: Option<u64>,
    pub instructions: Option<Vec<String>>,
    pub objective: Option<Objective>,
    pub workers: Option<usize>,
}

/// The `--config` file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<String>,
    pub dataset: Option<String>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub decoding: DecodingSection,
    #[serde(default)]
    pub backend: BackendSection,
    pub cache: Option<String>,
    pub output: Option<String>,
    #[serde(default)]
    pub search: SearchSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: FileConfig =
            serde_yaml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

/// Backend selection after flags are applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendChoice {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

impl BackendChoice {
    /// Parses `--backend scripted:<path>`, `http` or `http:<base url>`.
    pub fn parse_flag(spec: &str, section: &BackendSection) -> Result<Self, CliError> {
        let (kind, rest) = match spec.split_once(':') {
            Some(("scripted", path)) => ("scripted", Some(path)),
            Some(("http", url)) => ("http", Some(url)),
            None if spec == "http" || spec == "scripted" => (spec, None),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown backend {spec:?}; use scripted:<path> or http[:<url>]"
                )))
            }
        };
        let mut choice = Self::from_section(&BackendSection {
            kind: Some(kind.into()),
            ..section.clone()
        })?;
        match (kind, rest) {
            ("scripted", Some(p)) => choice.script = Some(p.into()),
            ("http", Some(u)) => choice.base_url = Some(u.into()),
            _ => {}
        }
        Ok(choice)
    }

    pub fn from_section(section: &BackendSection) -> Result<Self, CliError> {
        let kind = section
            .kind
            .clone()
            .ok_or_else(|| CliError::Config("no backend configured; set backend.kind or pass --backend".into()))?;
        match kind.as_str() {
            "scripted" => Ok(Self {
                kind,
                script: section.script.clone(),
                base_url: None,
                api_key_env: None,
                timeout_secs: None,
            }),
            "http" => Ok(Self {
                kind,
                script: None,
                base_url: section.base_url.clone(),
                api_key_env: Some(
                    section
                        .api_key_env
                        .clone()
                        .unwrap_or_else(|| DEFAULT_API_KEY_ENV.into()),
                ),
                timeout_secs: section.timeout_secs,
            }),
            other => Err(CliError::Config(format!("unknown backend kind {other:?}"))),
        }
    }

    /// Instantiates the backend. Scripted paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<Box<dyn Backend>, CliError> {
        match self.kind.as_str() {
            "scripted" => {
                let path = self
                    .script
                    .as_deref()
                    .ok_or_else(|| CliError::Config("scripted backend needs a script path".into()))?;
                let backend = ScriptedBackend::from_path(&resolve(base, path))
                    .map_err(|e| CliError::Config(format!("script {path}: {e}")))?;
                Ok(Box::new(backend))
            }
            _ => {
                let url = self
                    .base_url
                    .as_deref()
                    .ok_or_else(|| CliError::Config("http backend needs backend.base_url".into()))?;
                let mut cfg =
                    HttpConfig::new(url).with_api_key_env(self.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV));
                if let Some(secs) = self.timeout_secs {
                    cfg.timeout = std::time::Duration::from_secs(secs);
                }
                Ok(Box::new(
                    HttpBackend::new(cfg).map_err(|e| CliError::Config(e.to_string()))?,
                ))
            }
        }
    }
}

pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Values gathered from flags; `None` defers to the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub dataset: Option<String>,
    pub output: Option<String>,
    pub cache: Option<String>,
    pub backend: Option<String>,
    pub model: Option<String>,
    pub strategy: Option<Strategy>,
    pub budget: Option<u64>,
    pub max_exemplars: Option<usize>,
    pub search_seed: Option<u64>,
    pub objective: Option<Objective>,
    pub workers: Option<usize>,
    pub instructions: Vec<String>,
}

/// The fully resolved compile configuration. Everything except the output
/// and cache locations is echoed into the bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub task: String,
    pub dataset: String,
    pub split: EffectiveSplit,
    pub decoding: DecodingParams,
    pub backend: BackendChoice,
    pub search: SearchConfig,
    #[serde(skip)]
    pub output: String,
    #[serde(skip)]
    pub cache: Option<String>,
    #[serde(skip)]
    pub base: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveSplit {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl EffectiveSplit {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions::new(self.train, self.val, self.test)
    }
}

fn required<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("{what} is required (config file or flag)")))
}

impl Effective {
    /// Flags win over the file; the file wins over defaults.
    pub fn resolve(file: FileConfig, base: PathBuf, o: Overrides) -> Result<Self, CliError> {
        let backend = match &o.backend {
            Some(spec) => BackendChoice::parse_flag(spec, &file.backend)?,
            None => BackendChoice::from_section(&file.backend)?,
        };
        let model_default = if backend.kind == "scripted" {
            Some("scripted".to_string())
        } else {
            None
        };
        let d = &file.decoding;
        let pinned = DecodingParams::pinned("");
        let decoding = DecodingParams {
            temperature: d.temperature.unwrap_or(pinned.temperature),
            top_p: d.top_p.unwrap_or(pinned.top_p),
            seed: d.seed.unwrap_or(pinned.seed),
            max_tokens: d.max_tokens.unwrap_or(pinned.max_tokens),
            model_id: required(o.model.or(d.model_id.clone()).or(model_default), "decoding.model_id")?,
        };
        let s = file.search;
        let instructions = if o.instructions.is_empty() {
            required(s.instructions, "search.instructions")?
        } else {
            o.instructions
        };
        let search = SearchConfig {
            instructions,
            max_exemplars: o.max_exemplars.or(s.max_exemplars).unwrap_or(1),
            budget: required(o.budget.or(s.budget), "search.budget")?,
            strategy: o.strategy.or(s.strategy).unwrap_or(Strategy::RandomSearch),
            seed: o.search_seed.or(s.seed).unwrap_or(42),
            objective: o.objective.or(s.objective).unwrap_or(Objective::Accuracy),
            workers: o.workers.or(s.workers).unwrap_or(4),
        };
        let problems = search.problems();
        if !problems.is_empty() {
            return Err(CliError::Config(problems.join("; ")));
        }
        Ok(Self {
            task: required(o.task.or(file.task), "task")?,
            dataset: required(o.dataset.or(file.dataset), "dataset")?,
            split: EffectiveSplit {
                train: file.split.train.unwrap_or(0.6),
                val: file.split.val.unwrap_or(0.2),
                test: file.split.test.unwrap_or(0.2),
                seed: file.split.seed.unwrap_or(42),
            },
            decoding,
            backend,
            search,
            output: required(o.output.or(file.output), "output")?,
            cache: o.cache.or(file.cache),
            base,
        })
    }

    pub fn path(&self, p: &str) -> PathBuf {
        resolve(&self.base, p)
    }
}
