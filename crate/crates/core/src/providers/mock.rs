//! Scripted backend for offline runs.
//!
//! A script is JSON Lines, one rule per line:
//!
//! ```text
//! {"match": {"digest": "<sha256 of prompt>"}, "response": "..."}
//! {"match": {"regex": "(?s)minimum wage.*"}, "response": "...", "provider": "mock-a"}
//! {"match": {"contains": "carbon"}, "response": "..."}
//! {"match": "any", "response": "..."}
//! ```
//!
//! Rules are tried in file order and the first match wins. A rule with a
//! `provider` only applies to that provider.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::cache::prompt_digest;
use super::{Backend, ProviderError, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Digest(String),
    Regex(String),
    Contains(String),
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: MatchRule,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
}

impl ScriptRule {
    pub fn digest(prompt: &str, response: impl Into<String>) -> Self {
        ScriptRule { matcher: MatchRule::Digest(prompt_digest(prompt)), response: response.into(), provider: None }
    }

    pub fn regex(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule { matcher: MatchRule::Regex(pattern.into()), response: response.into(), provider: None }
    }

    pub fn for_provider(mut self, provider: impl Into<String>) -> Self {
        self.provider = Some(provider.into());
        self
    }
}

enum Compiled {
    Digest(String),
    Regex(Regex),
    Contains(String),
    Any,
}

pub struct MockBackend {
    provider: String,
    rules: Vec<(Compiled, String)>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(provider: &str, rules: Vec<ScriptRule>) -> Result<Self, ProviderError> {
        let mut compiled = Vec::new();
        for rule in rules {
            if rule.provider.as_deref().is_some_and(|p| p != provider) {
                continue;
            }
            let m = match rule.matcher {
                MatchRule::Digest(d) => Compiled::Digest(d.to_ascii_lowercase()),
                MatchRule::Regex(r) => Compiled::Regex(
                    Regex::new(&r).map_err(|e| ProviderError::Config(format!("bad mock regex `{r}`: {e}")))?,
                ),
                MatchRule::Contains(s) => Compiled::Contains(s),
                MatchRule::Any => Compiled::Any,
            };
            compiled.push((m, rule.response));
        }
        Ok(MockBackend { provider: provider.to_string(), rules: compiled, calls: AtomicU64::new(0) })
    }

    pub fn from_script(provider: &str, path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        Self::new(provider, parse_script(&text)?)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptRule>, ProviderError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ProviderError::Config(format!("mock script line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_script(rules: &[ScriptRule]) -> String {
    let mut out = String::new();
    for r in rules {
        out.push_str(&serde_json::to_string(r).expect("rule serializes"));
        out.push('\n');
    }
    out
}

impl Backend for MockBackend {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut digest = None;
        for (m, response) in &self.rules {
            let hit = match m {
                Compiled::Digest(d) => digest.get_or_insert_with(|| prompt_digest(prompt)) == d,
                Compiled::Regex(r) => r.is_match(prompt),
                Compiled::Contains(s) => prompt.contains(s.as_str()),
                Compiled::Any => true,
            };
            if hit {
                return Ok(response.clone());
            }
        }
        Err(TransportError::permanent(format!("no mock rule for {} matches prompt", self.provider)))
    }
}
