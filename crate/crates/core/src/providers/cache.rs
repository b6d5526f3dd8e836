//! Content-addressed response cache.
//!
//! Layout: `<root>/<provider>/<digest>.txt` holds the response bytes exactly as
//! received, `<digest>.meta.json` records when it was written and enough
//! about the body to detect a truncated or edited entry.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a prompt alone; used by mock scripts and cache metadata.
pub fn prompt_digest(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// SHA-256 over `provider 0x00 prompt`, hex encoded. No normalization.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(provider: &str, prompt: &str) -> Self {
        let mut h = Sha256::new();
        h.update(provider.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub timestamp: DateTime<Utc>,
    pub prompt_digest: String,
    pub response_sha256: String,
    pub response_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(String),
    Miss,
    Corrupt(String),
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

/// Provider names become directory names; anything outside `[A-Za-z0-9._-]`
/// is replaced.
pub fn safe_component(name: &str) -> String {
    let s: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' }).collect();
    if s.is_empty() || s == "." || s == ".." {
        format!("_{s}")
    } else {
        s
    }
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ResponseCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn paths(&self, provider: &str, key: &CacheKey) -> (PathBuf, PathBuf) {
        let dir = self.root.join(safe_component(provider));
        (dir.join(format!("{}.txt", key.as_str())), dir.join(format!("{}.meta.json", key.as_str())))
    }

    pub fn inspect(&self, provider: &str, key: &CacheKey) -> CacheLookup {
        let (body_path, meta_path) = self.paths(provider, key);
        let body = match fs::read(&body_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(format!("unreadable body: {e}")),
        };
        let meta: CacheMeta = match fs::read(&meta_path)
            .map_err(|e| e.to_string())
            .and_then(|m| serde_json::from_slice(&m).map_err(|e| e.to_string()))
        {
            Ok(m) => m,
            Err(e) => return CacheLookup::Corrupt(format!("bad metadata: {e}")),
        };
        if meta.response_bytes != body.len() as u64 || meta.response_sha256 != sha256_hex(&body) {
            return CacheLookup::Corrupt("body does not match recorded digest".into());
        }
        match String::from_utf8(body) {
            Ok(s) => CacheLookup::Hit(s),
            Err(_) => CacheLookup::Corrupt("body is not UTF-8".into()),
        }
    }

    /// Stored text, or `None`. Corrupted entries are reported and treated as
    /// absent.
    pub fn lookup(&self, provider: &str, key: &CacheKey) -> Option<String> {
        match self.inspect(provider, key) {
            CacheLookup::Hit(s) => Some(s),
            CacheLookup::Miss => None,
            CacheLookup::Corrupt(why) => {
                log::warn!("ignoring corrupted cache entry {}/{}: {why}", provider, key.as_str());
                None
            }
        }
    }

    pub fn store(&self, provider: &str, key: &CacheKey, prompt: &str, response: &str) -> io::Result<()> {
        let (body_path, meta_path) = self.paths(provider, key);
        let dir = body_path.parent().expect("cache entry has a parent");
        fs::create_dir_all(dir)?;
        let meta = CacheMeta {
            timestamp: Utc::now(),
            prompt_digest: prompt_digest(prompt),
            response_sha256: sha256_hex(response.as_bytes()),
            response_bytes: response.len() as u64,
        };
        // Body first: a crash between the two renames leaves a body without
        // metadata, which reads back as corrupt rather than as a wrong hit.
        atomic_write(dir, &body_path, response.as_bytes())?;
        let meta_json = serde_json::to_vec_pretty(&meta).map_err(io::Error::other)?;
        atomic_write(dir, &meta_path, &meta_json)
    }
}

fn atomic_write(dir: &Path, dest: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dest).map_err(|e| e.error)?;
    Ok(())
}
