//! Language-model completion backends and the deterministic response cache.

mod cache;
mod http;
mod scripted;

pub use cache::{cached_complete, ResponseCache};
pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use scripted::{Matcher, ScriptRule, ScriptedBackend};

use serde::{Deserialize, Serialize};

use crate::canonical::{self, CanonicalError};
use crate::taskspec::DecodingParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub system_text: String,
    pub user_text: String,
    pub params: DecodingParams,
}

/// SHA-256 over the canonical (system text, user text, decoding params incl. model id).
pub fn request_key(req: &PromptRequest) -> Result<String, CanonicalError> {
    canonical::content_hash(req)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// `<backend kind>:<model id>`
    pub backend_id: String,
    pub cached: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("no scripted rule matched request {key}")]
    NoRuleMatched { key: String },
    #[error("HTTP {status} from completion endpoint (body sha256 {body_digest})")]
    HttpError { status: u16, body_digest: String },
    #[error("completion endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out")]
    Timeout,
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("cache entry {0} failed its integrity check")]
    CacheCorrupt(String),
    #[error("no cached completion for request {key}")]
    CacheMiss { key: String },
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// A completion source. Implementations must be callable from several
/// worker threads at once.
pub trait Backend: Send + Sync {
    /// Short backend kind, e.g. `scripted` or `http`.
    fn kind(&self) -> &'static str;

    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError>;

    fn backend_id(&self, req: &PromptRequest) -> String {
        format!("{}:{}", self.kind(), req.params.model_id)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }

    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }

    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }
}

/// Where completions come from during screening, evaluation and replay.
#[derive(Clone, Copy)]
pub enum CompletionSource<'a> {
    /// Cache first, backend on a miss (stored afterwards).
    Cached {
        cache: &'a ResponseCache,
        backend: &'a dyn Backend,
    },
    /// Cache only; a miss is [`BackendError::CacheMiss`].
    CacheOnly(&'a ResponseCache),
    /// Backend only, nothing stored.
    Direct(&'a dyn Backend),
}

impl CompletionSource<'_> {
    pub fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        match self {
            CompletionSource::Cached { cache, backend } => cached_complete(cache, *backend, req),
            CompletionSource::CacheOnly(cache) => cache.lookup(req),
            CompletionSource::Direct(backend) => backend.complete(req),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn request(user: &str) -> PromptRequest {
        PromptRequest {
            system_text: "Screen abstracts.".into(),
            user_text: user.into(),
            params: DecodingParams::pinned("test-model"),
        }
    }

    #[test]
    fn request_key_is_stable_and_seed_sensitive() {
        let a = request("abstract one");
        assert_eq!(request_key(&a).unwrap(), request_key(&a.clone()).unwrap());
        let mut b = a.clone();
        b.params.seed = 43;
        assert_ne!(request_key(&a).unwrap(), request_key(&b).unwrap());
    }

    #[test]
    fn request_key_fixture_is_pinned() {
        let req = PromptRequest {
            system_text: "S".into(),
            user_text: "U".into(),
            params: DecodingParams::pinned("m"),
        };
        assert_eq!(
            String::from_utf8(canonical::canonicalize(&req).unwrap()).unwrap(),
            r#"{"params":{"max_tokens":1024,"model_id":"m","seed":42,"temperature":0,"top_p":1},"system_text":"S","user_text":"U"}"#
        );
        assert_eq!(
            request_key(&req).unwrap(),
            "6b5128f9be4e3510f1b503aa9fd71fbb36d3048421a2e5b1b124da165490bf43"
        );
    }
}
