//! Prompt batteries, rendering, and parsing of structured model output.
//!
//! A battery is a directory `prompts/<condition>/` holding one template per
//! variant (`<variant_id>.txt`) plus `return_schema.txt`, the instruction that
//! tells the model which JSON to return. Rendering substitutes `{bio}` and
//! `{policy}` into the template and appends the return schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

use crate::domain::{Condition, Expectation, Policy, UtilitySchedule, Vote, PERIOD_COUNT, PERIOD_LABELS};
use crate::providers::cache::sha256_hex;

pub const RETURN_SCHEMA_FILE: &str = "return_schema.txt";

/// Appended to a prompt when its first answer could not be parsed.
pub const REPAIR_SUFFIX: &str = "\n\nReturn only the JSON object.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("{condition} prompts take {expected} biography")]
    BioPrecondition { condition: Condition, expected: &'static str },
    #[error("template {variant_id} leaves placeholder {{{name}}} unsubstituted")]
    Unsubstituted { variant_id: String, name: String },
    #[error("battery: {0}")]
    Battery(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ParseError(pub String);

impl ParseError {
    fn new(msg: impl Into<String>) -> Self {
        ParseError(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptVariant {
    pub variant_id: String,
    pub condition: Condition,
    pub template: String,
    pub return_schema: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub condition: Condition,
    pub variant_id: String,
    pub expects: Expectation,
}

/// All prompt variants, grouped by condition and ordered by variant id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Battery {
    variants: BTreeMap<Condition, Vec<PromptVariant>>,
}

macro_rules! builtin {
    ($cond:literal, $file:literal) => {
        ($cond, $file, include_str!(concat!("../data/prompts/", $cond, "/", $file)))
    };
}

const BUILTIN: &[(&str, &str, &str)] = &[
    builtin!("default", "default.txt"),
    builtin!("default", "return_schema.txt"),
    builtin!("delegate", "delegate_1.txt"),
    builtin!("delegate", "delegate_2.txt"),
    builtin!("delegate", "delegate_3.txt"),
    builtin!("delegate", "delegate_4.txt"),
    builtin!("delegate", "delegate_5.txt"),
    builtin!("delegate", "return_schema.txt"),
    builtin!("trustee_dual", "dual_1.txt"),
    builtin!("trustee_dual", "dual_2.txt"),
    builtin!("trustee_dual", "dual_3.txt"),
    builtin!("trustee_dual", "return_schema.txt"),
    builtin!("trustee_periods", "periods_1.txt"),
    builtin!("trustee_periods", "periods_2.txt"),
    builtin!("trustee_periods", "periods_3.txt"),
    builtin!("trustee_periods", "return_schema.txt"),
];

impl Battery {
    /// The battery compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_files(BUILTIN.iter().map(|&(c, f, t)| (c.to_string(), f.to_string(), t.to_string())))
            .expect("builtin battery is well formed")
    }

    /// Reads `dir/<condition>/*.txt`. Conditions without a subdirectory are
    /// left empty.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let mut files = Vec::new();
        for cond in Condition::ALL {
            let sub = dir.join(cond.as_str());
            if !sub.is_dir() {
                continue;
            }
            let entries = fs::read_dir(&sub).map_err(|e| PromptError::Battery(format!("{}: {e}", sub.display())))?;
            for entry in entries {
                let path = entry.map_err(|e| PromptError::Battery(e.to_string()))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let text =
                    fs::read_to_string(&path).map_err(|e| PromptError::Battery(format!("{}: {e}", path.display())))?;
                files.push((cond.as_str().to_string(), name, text));
            }
        }
        Self::from_files(files)
    }

    fn from_files(files: impl IntoIterator<Item = (String, String, String)>) -> Result<Self, PromptError> {
        let mut templates: BTreeMap<Condition, Vec<(String, String)>> = BTreeMap::new();
        let mut schemas: BTreeMap<Condition, String> = BTreeMap::new();
        for (cond, name, text) in files {
            let condition: Condition =
                cond.parse().map_err(|_| PromptError::Battery(format!("unknown condition {cond}")))?;
            if name == RETURN_SCHEMA_FILE {
                schemas.insert(condition, text);
            } else {
                let id = name.strip_suffix(".txt").unwrap_or(&name).to_string();
                templates.entry(condition).or_default().push((id, text));
            }
        }
        let mut variants = BTreeMap::new();
        for (condition, mut list) in templates {
            let schema = schemas
                .get(&condition)
                .ok_or_else(|| PromptError::Battery(format!("{condition} has no {RETURN_SCHEMA_FILE}")))?;
            list.sort();
            let vs = list
                .into_iter()
                .map(|(variant_id, template)| PromptVariant {
                    variant_id,
                    condition,
                    template,
                    return_schema: schema.clone(),
                })
                .collect();
            variants.insert(condition, vs);
        }
        let battery = Battery { variants };
        battery.check_unique_ids()?;
        Ok(battery)
    }

    fn check_unique_ids(&self) -> Result<(), PromptError> {
        let mut seen = std::collections::BTreeSet::new();
        for v in self.variants.values().flatten() {
            if !seen.insert(v.variant_id.as_str()) {
                return Err(PromptError::Battery(format!("variant id {} used twice", v.variant_id)));
            }
        }
        Ok(())
    }

    pub fn variants(&self, condition: Condition) -> &[PromptVariant] {
        self.variants.get(&condition).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find(&self, variant_id: &str) -> Option<&PromptVariant> {
        self.variants.values().flatten().find(|v| v.variant_id == variant_id)
    }

    /// SHA-256 over every template and schema of one condition, in id order.
    pub fn digest(&self, condition: Condition) -> String {
        let mut buf = String::new();
        for v in self.variants(condition) {
            buf.push_str(&v.variant_id);
            buf.push('\0');
            buf.push_str(&v.template);
            buf.push('\0');
            buf.push_str(&v.return_schema);
            buf.push('\0');
        }
        sha256_hex(buf.as_bytes())
    }
}

/// Substitutes the template and appends the condition's return schema. The
/// `Default` condition takes no biography; every other condition needs one.
pub fn render(variant: &PromptVariant, bio: Option<&str>, policy: &Policy) -> Result<RenderedPrompt, PromptError> {
    let wants_bio = variant.condition != Condition::Default;
    if wants_bio != bio.is_some() {
        return Err(PromptError::BioPrecondition {
            condition: variant.condition,
            expected: if wants_bio { "a" } else { "no" },
        });
    }
    let mut text = String::with_capacity(variant.template.len() + variant.return_schema.len() + 256);
    let mut rest = variant.template.as_str();
    // Single pass, so substituted text is never rescanned for placeholders.
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after.find(|c: char| !(c.is_ascii_lowercase() || c == '_')).unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            match (name, bio) {
                ("bio", Some(b)) => text.push_str(b),
                ("policy", _) => text.push_str(&policy.statement),
                _ => {
                    return Err(PromptError::Unsubstituted {
                        variant_id: variant.variant_id.clone(),
                        name: name.to_string(),
                    })
                }
            }
            rest = &after[name_len + 1..];
        } else {
            text.push('{');
            rest = after;
        }
    }
    text.push_str(rest);
    text.push_str(&variant.return_schema);
    Ok(RenderedPrompt {
        text,
        condition: variant.condition,
        variant_id: variant.variant_id.clone(),
        expects: variant.condition.expects(),
    })
}

/// Candidate JSON objects in `raw`, in order of their opening brace. Text
/// around them (prose, code fences) is skipped.
fn json_objects(raw: &str) -> impl Iterator<Item = (usize, serde_json::Map<String, Value>)> + '_ {
    raw.char_indices().filter(|&(_, c)| c == '{').filter_map(move |(i, _)| {
        let mut de = serde_json::Deserializer::from_str(&raw[i..]);
        match Value::deserialize(&mut de) {
            Ok(Value::Object(map)) => Some((i, map)),
            _ => None,
        }
    })
}

fn first_object_with(raw: &str, keys: &[&str]) -> Option<(usize, serde_json::Map<String, Value>)> {
    json_objects(raw).find(|(_, m)| keys.iter().all(|k| m.contains_key(*k)))
}

fn score(v: &Value, what: &str) -> Result<f64, ParseError> {
    let s = v.as_f64().ok_or_else(|| ParseError::new(format!("{what} is not a number")))?;
    crate::domain::check_score(s).map_err(|e| ParseError::new(format!("{what}: {e}")))
}

/// Extracts `(vote, reason)` from the first object carrying both keys.
pub fn parse_binary(raw: &str) -> Result<(Vote, String), ParseError> {
    let (_, obj) = first_object_with(raw, &["reason", "vote"])
        .ok_or_else(|| ParseError::new("no object with `reason` and `vote`"))?;
    let vote = match obj["vote"].as_str().map(|s| s.trim().to_ascii_lowercase()).as_deref() {
        Some("yes") => Vote::Yes,
        Some("no") => Vote::No,
        _ => return Err(ParseError::new(format!("vote {} is neither Yes nor No", obj["vote"]))),
    };
    let reason = match &obj["reason"] {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    Ok((vote, reason))
}

fn text_of(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

/// Extracts a short/long schedule: `yes_vote` and `no_vote`, each with
/// numeric `short_util` and `long_util`. Returns the schedule and the joined
/// reasoning.
pub fn parse_dual(raw: &str) -> Result<(UtilitySchedule, String), ParseError> {
    let (_, obj) = first_object_with(raw, &["yes_vote", "no_vote"])
        .ok_or_else(|| ParseError::new("no object with `yes_vote` and `no_vote`"))?;
    let side = |key: &str| -> Result<(f64, f64, String), ParseError> {
        let o = obj[key].as_object().ok_or_else(|| ParseError::new(format!("`{key}` is not an object")))?;
        let get = |k: &str| o.get(k).ok_or_else(|| ParseError::new(format!("`{key}.{k}` missing")));
        Ok((
            score(get("short_util")?, &format!("{key}.short_util"))?,
            score(get("long_util")?, &format!("{key}.long_util"))?,
            text_of(o.get("reasoning")),
        ))
    };
    let (ys, yl, yr) = side("yes_vote")?;
    let (ns, nl, nr) = side("no_vote")?;
    let schedule = UtilitySchedule::dual(ys, yl, ns, nl).map_err(|e| ParseError::new(e.to_string()))?;
    Ok((schedule, format!("YES: {yr}\nNO: {nr}")))
}

/// JSON object read as an ordered list of entries, duplicates kept.
struct Entries<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Entries<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V_<V>(std::marker::PhantomData<V>);
        impl<'de, V: Deserialize<'de>> Visitor<'de> for V_<V> {
            type Value = Entries<V>;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V_(std::marker::PhantomData))
    }
}

fn period_index(label: &str) -> Option<usize> {
    let norm = label.trim().replace(['\u{2013}', '\u{2014}'], "-").to_ascii_lowercase();
    PERIOD_LABELS.iter().position(|l| *l == norm)
}

/// Extracts a six-period schedule from `yes` and `no` maps keyed by the period
/// labels. Missing, duplicate or unknown periods are errors.
pub fn parse_periods(raw: &str) -> Result<(UtilitySchedule, String), ParseError> {
    let (start, _) =
        first_object_with(raw, &["yes", "no"]).ok_or_else(|| ParseError::new("no object with `yes` and `no`"))?;
    let mut de = serde_json::Deserializer::from_str(&raw[start..]);
    let top = Entries::<Box<RawValue>>::deserialize(&mut de).map_err(|e| ParseError::new(e.to_string()))?;
    let mut rationale = String::new();
    let mut side = |key: &str| -> Result<[f64; PERIOD_COUNT], ParseError> {
        let mut found = top.0.iter().filter(|(k, _)| k == key);
        let raw_side = found.next().ok_or_else(|| ParseError::new(format!("`{key}` missing")))?;
        if found.next().is_some() {
            return Err(ParseError::new(format!("`{key}` appears twice")));
        }
        let entries: Entries<Value> =
            serde_json::from_str(raw_side.1.get()).map_err(|e| ParseError::new(format!("`{key}`: {e}")))?;
        let mut slots: [Option<f64>; PERIOD_COUNT] = [None; PERIOD_COUNT];
        let mut notes: [String; PERIOD_COUNT] = Default::default();
        for (label, v) in &entries.0 {
            let t =
                period_index(label).ok_or_else(|| ParseError::new(format!("`{key}` has unknown period {label:?}")))?;
            if slots[t].is_some() {
                return Err(ParseError::new(format!("`{key}` repeats period {label:?}")));
            }
            let s = v.get("score").ok_or_else(|| ParseError::new(format!("`{key}.{label}.score` missing")))?;
            slots[t] = Some(score(s, &format!("{key}.{label}.score"))?);
            notes[t] = text_of(v.get("rationale"));
        }
        let mut out = [0.0; PERIOD_COUNT];
        for (t, slot) in slots.iter().enumerate() {
            out[t] = slot.ok_or_else(|| ParseError::new(format!("`{key}` missing period {}", PERIOD_LABELS[t])))?;
        }
        for (t, note) in notes.iter().enumerate() {
            rationale.push_str(&format!("{} {}: {}\n", key.to_uppercase(), PERIOD_LABELS[t], note));
        }
        Ok(out)
    };
    let yes = side("yes")?;
    let no = side("no")?;
    let schedule = UtilitySchedule::periods(yes, no).map_err(|e| ParseError::new(e.to_string()))?;
    Ok((schedule, rationale.trim_end().to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Vote { vote: Vote, rationale: String },
    Schedule { schedule: UtilitySchedule, rationale: String },
}

pub fn parse_response(expects: Expectation, raw: &str) -> Result<Parsed, ParseError> {
    match expects {
        Expectation::BinaryVote => parse_binary(raw).map(|(vote, rationale)| Parsed::Vote { vote, rationale }),
        Expectation::DualSchedule => {
            parse_dual(raw).map(|(schedule, rationale)| Parsed::Schedule { schedule, rationale })
        }
        Expectation::PeriodSchedule => {
            parse_periods(raw).map(|(schedule, rationale)| Parsed::Schedule { schedule, rationale })
        }
    }
}
