use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::canonical::{self, CanonicalError};

/// Digest of every content file plus a seal over the manifest itself.
///
/// The seal is SHA-256 of the canonical manifest with `seal` removed. It
/// covers `created_at`, so an edit anywhere in the manifest is detectable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub created_at: String,
    pub files: BTreeMap<String, String>,
    pub seal: String,
}

#[derive(Serialize)]
struct Unsealed<'a> {
    schema_version: u32,
    tool_version: &'a str,
    created_at: &'a str,
    files: &'a BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(
        schema_version: u32,
        tool_version: &str,
        created_at: &str,
        files: BTreeMap<String, String>,
    ) -> Result<Self, CanonicalError> {
        let mut manifest = Self {
            schema_version,
            tool_version: tool_version.to_string(),
            created_at: created_at.to_string(),
            files,
            seal: String::new(),
        };
        manifest.seal = manifest.expected_seal()?;
        Ok(manifest)
    }

    pub fn expected_seal(&self) -> Result<String, CanonicalError> {
        canonical::content_hash(&Unsealed {
            schema_version: self.schema_version,
            tool_version: &self.tool_version,
            created_at: &self.created_at,
            files: &self.files,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CanonicalError> {
        canonical::canonicalize(self)
    }

    /// Parses manifest bytes, requiring canonical form and a valid seal.
    pub fn parse_sealed(bytes: &[u8]) -> Result<Self, String> {
        let manifest: Manifest = serde_json::from_slice(bytes).map_err(|e| format!("not a manifest: {e}"))?;
        let canonical = manifest.to_bytes().map_err(|e| e.to_string())?;
        if canonical != bytes {
            return Err("not in canonical form".into());
        }
        let expected = manifest.expected_seal().map_err(|e| e.to_string())?;
        if manifest.seal != expected {
            return Err("seal does not match manifest content".into());
        }
        Ok(manifest)
    }
}
