#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use civicsim_core::corpus;
use civicsim_core::domain::{Expectation, Policy, VoterProfile, PERIOD_LABELS};
use civicsim_core::prompts::{self, Battery};
use civicsim_core::providers::{cache::sha256_hex, mock, ProviderHandle, RequestShape, ScriptRule};
use civicsim_core::runner::{plan_cells, LoadedPlan, RunPlan};
use civicsim_core::Condition;

pub const MODELS: [&str; 2] = ["mock-a", "mock-b"];
pub const FIXED_TIME: &str = "2025-03-01T12:00:00Z";

/// Three phrasing pairs (two contested, one consensus) and ten profiles.
pub fn small_corpus() -> (Vec<Policy>, Vec<VoterProfile>) {
    let keep = ["min_wage", "immigration", "carbon_emissions"];
    let policies = corpus::shipped_policies().into_iter().filter(|p| keep.contains(&p.pair_id.as_str())).collect();
    let profiles = corpus::shipped_profiles().into_iter().take(10).collect();
    (policies, profiles)
}

/// Deterministic bytes for a (model, prompt) pair.
fn seed(model: &str, prompt: &str) -> Vec<u8> {
    hex_bytes(&sha256_hex(format!("{model}\n{prompt}").as_bytes()))
}

fn hex_bytes(h: &str) -> Vec<u8> {
    (0..h.len()).step_by(2).map(|i| u8::from_str_radix(&h[i..i + 2], 16).unwrap()).collect()
}

/// A plausible, schema-conformant reply whose content depends only on the
/// model and the prompt.
pub fn scripted_reply(model: &str, prompt: &str, expects: Expectation) -> String {
    let b = seed(model, prompt);
    let score = |i: usize| u32::from(b[i % b.len()]) % 101;
    match expects {
        Expectation::BinaryVote => {
            let vote = if b[0].is_multiple_of(2) { "Yes" } else { "No" };
            let body = format!(r#"{{"reason": "Scripted answer {}.", "vote": "{vote}"}}"#, b[1]);
            if b[2].is_multiple_of(3) {
                format!("Here is my answer:\n```json\n{body}\n```")
            } else {
                body
            }
        }
        Expectation::DualSchedule => format!(
            r#"{{"yes_vote": {{"reasoning": "y", "long_util": {}, "short_util": {}}}, "no_vote": {{"reasoning": "n", "long_util": {}, "short_util": {}}}}}"#,
            score(3),
            score(4),
            score(5),
            score(6)
        ),
        Expectation::PeriodSchedule => {
            let side = |offset: usize| {
                PERIOD_LABELS
                    .iter()
                    .enumerate()
                    .map(|(t, label)| format!(r#""{label}": {{"rationale": "r{t}", "score": {}}}"#, score(offset + t)))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            format!(r#"{{"yes": {{{}}}, "no": {{{}}}}}"#, side(7), side(13))
        }
    }
}

/// One digest rule per cell and model, covering the whole plan.
pub fn script_for(loaded: &LoadedPlan) -> Vec<ScriptRule> {
    let mut rules = Vec::new();
    for cell in plan_cells(loaded) {
        let variant = loaded.battery.find(&cell.variant_id).unwrap();
        let policy = loaded.policies.iter().find(|p| p.id == cell.policy_id).unwrap();
        let bio =
            cell.profile_id.as_ref().map(|id| loaded.profiles.iter().find(|p| &p.id == id).unwrap().biography.as_str());
        let prompt = prompts::render(variant, bio, policy).unwrap();
        let reply = scripted_reply(&cell.model, &prompt.text, prompt.expects);
        rules.push(ScriptRule::digest(&prompt.text, reply).for_provider(cell.model.as_str()));
    }
    rules
}

pub fn mock_handle(name: &str, script: &Path) -> ProviderHandle {
    ProviderHandle {
        request_shape: RequestShape::Mock,
        mock_script: Some(script.to_path_buf()),
        backoff_base_ms: 0,
        ..ProviderHandle::mock(name)
    }
}

/// Writes corpus, script and plan for a two-model, all-condition mock run
/// under `dir` and returns the plan.
pub fn mock_plan(dir: &Path, run_id: &str) -> RunPlan {
    fs::create_dir_all(dir).unwrap();
    let (policies, profiles) = small_corpus();
    let policies_path = dir.join("policies.json");
    let profiles_path = dir.join("profiles.jsonl");
    corpus::save_policies(&policies_path, &policies).unwrap();
    corpus::save_profiles(&profiles_path, &profiles).unwrap();
    let script = dir.join("script.jsonl");
    let mut plan = RunPlan {
        run_id: run_id.into(),
        models: MODELS.iter().map(|m| m.to_string()).collect(),
        providers: MODELS.iter().map(|m| mock_handle(m, &script)).collect(),
        conditions: Condition::ALL.to_vec(),
        variants: None,
        profiles: Some(profiles_path),
        policies: Some(policies_path),
        parallelism: 4,
        resume: false,
        runs_dir: dir.join("runs"),
        cache_dir: None,
        prompts_dir: None,
        fixed_timestamp: Some(FIXED_TIME.parse().unwrap()),
    };
    let loaded = LoadedPlan::from_parts(plan.clone(), policies, profiles, Battery::builtin()).unwrap();
    fs::write(&script, mock::write_script(&script_for(&loaded))).unwrap();
    plan.resume = false;
    plan
}

pub fn write_plan_file(dir: &Path, plan: &RunPlan) -> PathBuf {
    let path = dir.join("plan.json");
    fs::write(&path, serde_json::to_string_pretty(plan).unwrap()).unwrap();
    path
}

/// Bytes of every file directly under `dir`, sorted by name.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
