//! Policy corpus and voter-profile sets: loading, validation, synthesis.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;
use std::thread;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::domain::{DemographicField, Demographics, Policy, PolicyCategory, ProfileId, VoterProfile};
use crate::providers::{Provider, ProviderError};

pub const SHIPPED_POLICIES_JSON: &str = include_str!("../data/policies.json");
pub const SHIPPED_PROFILES_JSONL: &str = include_str!("../data/profiles.jsonl");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Format { path: String, line: usize, column: usize, message: String },
    #[error("corpus rejected: {0}")]
    Validation(CorpusValidationReport),
    #[error("duplicate profile id {id} on line {line}")]
    DuplicateProfile { id: ProfileId, line: usize },
    #[error(transparent)]
    Field(#[from] crate::domain::DomainError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ValidationIssue {
    pub entity_id: String,
    pub rule: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
}

impl CorpusValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.errors.is_empty()
    }
}

impl std::fmt::Display for CorpusValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error(s)", self.errors.len())?;
        for e in &self.errors {
            write!(f, "; {} [{}]: {}", e.entity_id, e.rule, e.message)?;
        }
        Ok(())
    }
}

fn issue(entity_id: impl Into<String>, rule: &'static str, message: impl Into<String>) -> ValidationIssue {
    ValidationIssue { entity_id: entity_id.into(), rule, message: message.into() }
}

/// Checks pairing, polarity, the expert-stance rule and non-empty statements.
/// The result does not depend on input order.
pub fn validate_corpus(policies: &[Policy]) -> CorpusValidationReport {
    let mut report = CorpusValidationReport::default();
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pairs: BTreeMap<&str, Vec<&Policy>> = BTreeMap::new();
    for p in policies {
        *ids.entry(p.id.as_str()).or_default() += 1;
        pairs.entry(p.pair_id.as_str()).or_default().push(p);
        if p.statement.trim().is_empty() {
            report.errors.push(issue(p.id.as_str(), "empty_statement", "statement is empty"));
        }
        match (p.category, p.expert_stance) {
            (PolicyCategory::Consensus, None) => {
                report.errors.push(issue(p.id.as_str(), "expert_stance", "consensus policy has no expert stance"))
            }
            (PolicyCategory::Contested, Some(_)) => {
                report.errors.push(issue(p.id.as_str(), "expert_stance", "contested policy carries an expert stance"))
            }
            _ => {}
        }
    }
    for (id, n) in ids {
        if n > 1 {
            report.errors.push(issue(id, "duplicate_id", format!("id used by {n} policies")));
        }
    }
    for (pair, members) in pairs {
        if members.len() != 2 {
            report.errors.push(issue(
                pair,
                "pair_incomplete",
                format!("pair has {} member(s), expected 2", members.len()),
            ));
            continue;
        }
        let (a, b) = (members[0], members[1]);
        if a.polarity == b.polarity {
            report.errors.push(issue(pair, "pair_polarity", "both phrasings have the same polarity"));
        }
        if a.category != b.category {
            report.errors.push(issue(pair, "pair_category", "phrasings disagree on category"));
        }
        if let (Some(x), Some(y)) = (a.expert_stance, b.expert_stance) {
            if x == y {
                report.errors.push(issue(pair, "pair_expert_stance", "expert stance is not opposed across the pair"));
            }
        }
        let models: BTreeSet<&String> = a.model_defaults.keys().chain(b.model_defaults.keys()).collect();
        for m in models {
            match (a.model_defaults.get(m), b.model_defaults.get(m)) {
                (Some(x), Some(y)) if x == y => report.warnings.push(issue(
                    pair,
                    "pair_default_consistency",
                    format!("{m} answers {x} to both phrasings"),
                )),
                (Some(_), Some(_)) => {}
                _ => report.warnings.push(issue(
                    pair,
                    "pair_default_coverage",
                    format!("{m} lacks a default for one phrasing"),
                )),
            }
        }
    }
    report.errors.sort();
    report.warnings.sort();
    report
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

fn format_error(path: &str, line_offset: usize, e: &serde_json::Error) -> CorpusError {
    CorpusError::Format {
        path: path.to_string(),
        line: e.line() + line_offset,
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn parse_policies(text: &str, origin: &str) -> Result<Vec<Policy>, CorpusError> {
    let policies: Vec<Policy> = serde_json::from_str(text).map_err(|e| format_error(origin, 0, &e))?;
    let report = validate_corpus(&policies);
    if !report.is_accepted() {
        return Err(CorpusError::Validation(report));
    }
    Ok(policies)
}

/// Reads and validates `policies.json`; any validation error rejects the file.
pub fn load_policies(path: &Path) -> Result<Vec<Policy>, CorpusError> {
    parse_policies(&read(path)?, &path.display().to_string())
}

pub fn shipped_policies() -> Vec<Policy> {
    parse_policies(SHIPPED_POLICIES_JSON, "policies.json").expect("shipped corpus is valid")
}

pub fn policies_to_json(policies: &[Policy]) -> String {
    let mut s = serde_json::to_string_pretty(policies).expect("policies serialize");
    s.push('\n');
    s
}

pub fn save_policies(path: &Path, policies: &[Policy]) -> Result<(), CorpusError> {
    fs::write(path, policies_to_json(policies))
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

pub fn parse_profiles(text: &str, origin: &str) -> Result<Vec<VoterProfile>, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let profile: VoterProfile = serde_json::from_str(line).map_err(|e| format_error(origin, i, &e))?;
        if !seen.insert(profile.id.clone()) {
            return Err(CorpusError::DuplicateProfile { id: profile.id, line: i + 1 });
        }
        out.push(profile);
    }
    Ok(out)
}

pub fn load_profiles(path: &Path) -> Result<Vec<VoterProfile>, CorpusError> {
    parse_profiles(&read(path)?, &path.display().to_string())
}

pub fn shipped_profiles() -> Vec<VoterProfile> {
    parse_profiles(SHIPPED_PROFILES_JSONL, "profiles.jsonl").expect("shipped profiles are valid")
}

pub fn profiles_to_jsonl(profiles: &[VoterProfile]) -> String {
    let mut s = String::new();
    for p in profiles {
        s.push_str(&serde_json::to_string(p).expect("profile serializes"));
        s.push('\n');
    }
    s
}

pub fn save_profiles(path: &Path, profiles: &[VoterProfile]) -> Result<(), CorpusError> {
    fs::write(path, profiles_to_jsonl(profiles))
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

/// Counts per category; every category of the field appears, zeros
/// included.
pub fn histogram(profiles: &[VoterProfile], field: DemographicField) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = field.categories().into_iter().map(|c| (c, 0)).collect();
    for p in profiles {
        *counts.entry(p.demographics.value_of(field)).or_default() += 1;
    }
    counts
}

pub fn demographic_histogram(profiles: &[VoterProfile], field: &str) -> Result<BTreeMap<String, usize>, CorpusError> {
    Ok(histogram(profiles, field.parse()?))
}

// ---------------------------------------------------------------------------
// Two-stage profile synthesis

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    /// Extra rounds allowed after the first, for replacing dropped records.
    pub retry_budget: usize,
    pub parallelism: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { retry_budget: 2, parallelism: 8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GeneratedProfiles {
    pub profiles: Vec<VoterProfile>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
#[error("profile generation stopped after {} profile(s): {source}", partial.profiles.len())]
pub struct GenerationError {
    pub partial: GeneratedProfiles,
    #[source]
    pub source: ProviderError,
}

/// Schema description handed to the model in stage 1.
pub fn default_demographics_spec() -> String {
    let mut s = String::from("Use exactly these fields and values:\n");
    for f in DemographicField::STORED {
        if f == DemographicField::HouseholdSize {
            s.push_str("- household_size: an integer from 1 to 20\n");
        } else {
            s.push_str(&format!("- {}: one of {}\n", f.name(), f.categories().join(" | ")));
        }
    }
    s
}

pub fn demographics_prompt(count: usize, round: usize, seed_demo_spec: &str) -> String {
    format!(
        "Generate demographic records for {count} different people who together represent a diverse set of Americans. \
         This is batch {batch}.\n{seed_demo_spec}\nReturn a JSON array with one object per person.",
        batch = round + 1
    )
}

pub fn biography_prompt(demographics: &Demographics, attempt: usize) -> String {
    let json = serde_json::to_string_pretty(demographics).expect("demographics serialize");
    let mut p = format!(
        "Write a detailed, plausible biography of an individual with the following demographics:\n{json}\n\
         Return a JSON object containing the 'name' and 'biography'."
    );
    if attempt > 0 {
        p.push_str(crate::prompts::REPAIR_SUFFIX);
        p.push_str(&format!(" (attempt {})", attempt + 1));
    }
    p
}

fn first_array(raw: &str) -> Option<Vec<Value>> {
    for (i, c) in raw.char_indices() {
        if c != '[' && c != '{' {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&raw[i..]);
        match serde::Deserialize::deserialize(&mut de) {
            Ok(Value::Array(items)) => return Some(items),
            Ok(Value::Object(map)) => {
                if let Some(items) = map.values().find_map(|v| v.as_array()) {
                    return Some(items.clone());
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_biography(raw: &str) -> Option<String> {
    for (i, c) in raw.char_indices() {
        if c != '{' {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&raw[i..]);
        if let Ok(Value::Object(map)) = serde::Deserialize::deserialize(&mut de) {
            if let Some(bio) = map.get("biography").and_then(Value::as_str) {
                if !bio.trim().is_empty() {
                    return Some(bio.to_string());
                }
            }
        }
    }
    None
}

fn biography_for(
    provider: &Provider,
    demographics: &Demographics,
    retry_budget: usize,
) -> Result<Result<String, String>, ProviderError> {
    for attempt in 0..=retry_budget {
        let raw = provider.complete(&biography_prompt(demographics, attempt))?;
        if let Some(bio) = parse_biography(&raw) {
            return Ok(Ok(bio));
        }
    }
    Ok(Err(format!("no usable biography after {} attempt(s)", retry_budget + 1)))
}

/// Stage 1 asks for demographic records, stage 2 for one biography per
/// record. Invalid records are dropped with a warning and replaced by fresh
/// draws for at most `retry_budget` further rounds and `3 * count` records
/// drawn in total.
pub fn generate_profiles(
    count: usize,
    provider: &Provider,
    seed_demo_spec: &str,
    config: &GenerationConfig,
) -> Result<GeneratedProfiles, GenerationError> {
    let mut out = GeneratedProfiles::default();
    let cap = count.saturating_mul(3);
    let mut drawn = 0usize;
    let mut round = 0usize;
    while out.profiles.len() < count && drawn < cap && round <= config.retry_budget {
        let need = (count - out.profiles.len()).min(cap - drawn);
        let raw = match provider.complete(&demographics_prompt(need, round, seed_demo_spec)) {
            Ok(raw) => raw,
            Err(source) => return Err(GenerationError { partial: out, source }),
        };
        round += 1;
        let items = first_array(&raw).unwrap_or_default();
        if items.is_empty() {
            out.warnings.push(format!("round {round}: response held no demographic records"));
        }
        drawn += items.len().max(1).min(need);
        let mut accepted = Vec::new();
        for (i, item) in items.into_iter().take(need).enumerate() {
            match serde_json::from_value::<Demographics>(item) {
                Ok(d) => accepted.push(d),
                Err(e) => out.warnings.push(format!("round {round}, record {}: dropped: {e}", i + 1)),
            }
        }
        let results = biographies(provider, &accepted, config);
        for (demographics, result) in accepted.into_iter().zip(results) {
            match result {
                Ok(Ok(biography)) => {
                    let id = ProfileId(format!("p{:03}", out.profiles.len() + 1));
                    out.profiles.push(VoterProfile { id, demographics, biography });
                }
                Ok(Err(why)) => out.warnings.push(format!("round {round}: dropped record: {why}")),
                Err(source) => return Err(GenerationError { partial: out, source }),
            }
        }
    }
    if out.profiles.len() < count {
        out.warnings.push(format!("generated {} of {count} requested profile(s)", out.profiles.len()));
    }
    Ok(out)
}

/// Stage-2 requests, issued `parallelism` at a time; results keep input order.
fn biographies(
    provider: &Provider,
    demographics: &[Demographics],
    config: &GenerationConfig,
) -> Vec<Result<Result<String, String>, ProviderError>> {
    let mut results = Vec::with_capacity(demographics.len());
    for chunk in demographics.chunks(config.parallelism.max(1)) {
        let chunk_results: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> =
                chunk.iter().map(|d| s.spawn(move || biography_for(provider, d, config.retry_budget))).collect();
            handles.into_iter().map(|h| h.join().expect("biography worker panicked")).collect()
        });
        results.extend(chunk_results);
    }
    results
}

/// Index of profiles by id.
pub fn profile_index(profiles: &[VoterProfile]) -> HashMap<&ProfileId, &VoterProfile> {
    profiles.iter().map(|p| (&p.id, p)).collect()
}
