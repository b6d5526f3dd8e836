//! Plans and executes a run: one record per (model, condition, variant,
//! profile, policy) cell, appended to `runs/<run_id>/records.jsonl`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError};
use crate::domain::{CellKey, Condition, Policy, PolicyId, ProfileId, RecordStatus, VoteRecord, VoterProfile};
use crate::prompts::{self, Battery, Parsed, PromptError, REPAIR_SUFFIX};
use crate::providers::cache::sha256_hex;
use crate::providers::{Provider, ProviderError, ProviderHandle, ResponseCache};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";
const PROGRESS_EVERY: usize = 1000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Log { path: String, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

fn default_parallelism() -> usize {
    8
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything needed to (re)start a run. Missing corpus paths fall back to
/// the shipped data; a missing prompts directory to the built-in battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPlan {
    pub run_id: String,
    /// Provider names, each defined in `providers`.
    pub models: Vec<String>,
    pub providers: Vec<ProviderHandle>,
    pub conditions: Vec<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policies: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub resume: bool,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    /// Stamped on every record instead of the wall clock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_timestamp: Option<DateTime<Utc>>,
}

impl RunPlan {
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut plan: RunPlan =
            serde_json::from_str(&text).map_err(|e| RunError::Plan(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        plan.resolve_paths(&std::path::absolute(base).map_err(io_err(base))?);
        Ok(plan)
    }

    /// Makes relative paths relative to `base` (the plan file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in
            [&mut self.profiles, &mut self.policies, &mut self.cache_dir, &mut self.prompts_dir].into_iter().flatten()
        {
            fix(p);
        }
        fix(&mut self.runs_dir);
        for h in &mut self.providers {
            if let Some(p) = &mut h.mock_script {
                fix(p);
            }
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.run_id)
    }

    fn check(&self) -> Result<(), RunError> {
        let id_ok = !self.run_id.is_empty()
            && !self.run_id.starts_with('.')
            && self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !id_ok {
            return Err(RunError::Plan(format!("run_id `{}` is not filesystem-safe", self.run_id)));
        }
        if self.parallelism == 0 {
            return Err(RunError::Plan("parallelism must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.models {
            if !seen.insert(m) {
                return Err(RunError::Plan(format!("model {m} listed twice")));
            }
            if !self.providers.iter().any(|h| &h.name == m) {
                return Err(RunError::Plan(format!("model {m} has no provider entry")));
            }
        }
        let conditions: BTreeSet<_> = self.conditions.iter().collect();
        if conditions.len() != self.conditions.len() {
            return Err(RunError::Plan("a condition is listed twice".into()));
        }
        Ok(())
    }
}

/// A plan with its corpus and prompt battery loaded and validated.
#[derive(Debug, Clone)]
pub struct LoadedPlan {
    pub plan: RunPlan,
    pub policies: Vec<Policy>,
    pub profiles: Vec<VoterProfile>,
    pub battery: Battery,
}

impl LoadedPlan {
    pub fn load(plan: RunPlan) -> Result<Self, RunError> {
        plan.check()?;
        let policies = match &plan.policies {
            Some(p) => corpus::load_policies(p)?,
            None => corpus::shipped_policies(),
        };
        let profiles = match &plan.profiles {
            Some(p) => corpus::load_profiles(p)?,
            None => corpus::shipped_profiles(),
        };
        let battery = match &plan.prompts_dir {
            Some(d) => Battery::load(d)?,
            None => Battery::builtin(),
        };
        let loaded = LoadedPlan { plan, policies, profiles, battery };
        loaded.check_variants()?;
        Ok(loaded)
    }

    pub fn from_parts(
        plan: RunPlan,
        policies: Vec<Policy>,
        profiles: Vec<VoterProfile>,
        battery: Battery,
    ) -> Result<Self, RunError> {
        plan.check()?;
        let report = corpus::validate_corpus(&policies);
        if !report.is_accepted() {
            return Err(CorpusError::Validation(report).into());
        }
        let loaded = LoadedPlan { plan, policies, profiles, battery };
        loaded.check_variants()?;
        Ok(loaded)
    }

    fn check_variants(&self) -> Result<(), RunError> {
        if let Some(filter) = &self.plan.variants {
            for id in filter {
                match self.battery.find(id) {
                    Some(v) if self.plan.conditions.contains(&v.condition) => {}
                    Some(v) => {
                        return Err(RunError::Plan(format!(
                            "variant {id} belongs to {}, which the plan omits",
                            v.condition
                        )))
                    }
                    None => return Err(RunError::Plan(format!("unknown prompt variant {id}"))),
                }
            }
        }
        for &c in &self.plan.conditions {
            if self.variant_ids(c).is_empty() {
                return Err(RunError::Plan(format!("no prompt variants selected for {c}")));
            }
        }
        Ok(())
    }

    pub fn variant_ids(&self, condition: Condition) -> Vec<&str> {
        self.battery
            .variants(condition)
            .iter()
            .map(|v| v.variant_id.as_str())
            .filter(|id| self.plan.variants.as_ref().is_none_or(|f| f.iter().any(|x| x == id)))
            .collect()
    }

    pub fn corpus_digests(&self) -> CorpusDigests {
        CorpusDigests {
            policies: sha256_hex(corpus::policies_to_json(&self.policies).as_bytes()),
            profiles: sha256_hex(corpus::profiles_to_jsonl(&self.profiles).as_bytes()),
        }
    }
}

/// Enumerates cells in a fixed order: model, condition, variant, then
/// profile and policy. Default cells have no profile.
pub fn plan_cells(loaded: &LoadedPlan) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for model in &loaded.plan.models {
        for &condition in &loaded.plan.conditions {
            for variant in loaded.variant_ids(condition) {
                let cell = |profile_id: Option<&ProfileId>, policy: &Policy| CellKey {
                    model: model.clone(),
                    condition,
                    variant_id: variant.to_string(),
                    profile_id: profile_id.cloned(),
                    policy_id: policy.id.clone(),
                };
                if condition == Condition::Default {
                    cells.extend(loaded.policies.iter().map(|p| cell(None, p)));
                } else {
                    for profile in &loaded.profiles {
                        cells.extend(loaded.policies.iter().map(|p| cell(Some(&profile.id), p)));
                    }
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDigests {
    pub policies: String,
    pub profiles: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub planned: usize,
    pub completed: usize,
    pub parse_failed: usize,
    pub provider_failed: usize,
}

impl RunCounts {
    pub fn recorded(&self) -> usize {
        self.completed + self.parse_failed + self.provider_failed
    }

    fn add(&mut self, status: RecordStatus) {
        match status {
            RecordStatus::Ok => self.completed += 1,
            RecordStatus::ParseFailed => self.parse_failed += 1,
            RecordStatus::ProviderFailed => self.provider_failed += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub plan: RunPlan,
    pub corpus_digests: CorpusDigests,
    pub battery_digests: BTreeMap<Condition, String>,
    pub counts: RunCounts,
    pub started: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<DateTime<Utc>>,
    pub complete: bool,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, RunError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Log {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Reads a record log. A final line without its newline is an interrupted
/// write; it is ignored and its byte offset returned so callers can cut it.
pub fn read_records(path: &Path) -> Result<(Vec<VoteRecord>, u64), RunError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            log::warn!("{}: dropping incomplete final line {line_no}", path.display());
            break;
        }
        if !buf.trim().is_empty() {
            let record: VoteRecord = serde_json::from_str(&buf).map_err(|e| RunError::Log {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        good += n as u64;
    }
    Ok((records, good))
}

pub fn load_records(run_dir: &Path) -> Result<Vec<VoteRecord>, RunError> {
    Ok(read_records(&run_dir.join(RECORDS_FILE))?.0)
}

/// Runs the cells of a loaded plan against a set of providers.
pub struct Executor {
    loaded: LoadedPlan,
    providers: BTreeMap<String, Provider>,
    stop_after: Option<usize>,
}

impl Executor {
    /// Builds providers from the plan's handles, sharing one response cache.
    pub fn new(loaded: LoadedPlan) -> Result<Self, RunError> {
        let mut providers = BTreeMap::new();
        for name in &loaded.plan.models {
            let handle = loaded.plan.providers.iter().find(|h| &h.name == name).expect("checked by plan").clone();
            let cache = match &loaded.plan.cache_dir {
                Some(dir) => Some(ResponseCache::open(dir).map_err(io_err(dir))?),
                None => None,
            };
            providers.insert(name.clone(), Provider::from_handle(handle, cache)?);
        }
        Ok(Executor { loaded, providers, stop_after: None })
    }

    pub fn with_providers(loaded: LoadedPlan, providers: BTreeMap<String, Provider>) -> Result<Self, RunError> {
        for m in &loaded.plan.models {
            if !providers.contains_key(m) {
                return Err(RunError::Plan(format!("no provider supplied for {m}")));
            }
        }
        Ok(Executor { loaded, providers, stop_after: None })
    }

    /// Stops cleanly after appending `n` new records, leaving the run
    /// incomplete. Used to exercise resume.
    pub fn stop_after(mut self, n: usize) -> Self {
        self.stop_after = Some(n);
        self
    }

    pub fn provider(&self, name: &str) -> Option<&Provider> {
        self.providers.get(name)
    }

    pub fn loaded(&self) -> &LoadedPlan {
        &self.loaded
    }

    fn now(&self) -> DateTime<Utc> {
        self.loaded.plan.fixed_timestamp.unwrap_or_else(Utc::now)
    }

    pub fn run(&self) -> Result<RunManifest, RunError> {
        let plan = &self.loaded.plan;
        let dir = plan.run_dir();
        let log_path = dir.join(RECORDS_FILE);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if !plan.resume && log_path.exists() {
            return Err(RunError::Plan(format!("{} already exists; resume the run instead", log_path.display())));
        }
        // Stored with absolute paths so `resume` works from any directory.
        let plan_path = dir.join(PLAN_FILE);
        let mut stored = plan.clone();
        stored.resume = false;
        let cwd = std::env::current_dir().map_err(io_err(Path::new(".")))?;
        stored.resolve_paths(&cwd);
        let mut plan_json = serde_json::to_string_pretty(&stored).expect("plan serializes");
        plan_json.push('\n');
        fs::write(&plan_path, plan_json).map_err(io_err(&plan_path))?;

        let cells = plan_cells(&self.loaded);
        let index: HashMap<&CellKey, usize> = cells.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let (existing, good_len) = read_records(&log_path)?;
        let mut done = vec![false; cells.len()];
        let mut counts = RunCounts { planned: cells.len(), ..Default::default() };
        for (i, r) in existing.iter().enumerate() {
            let key = r.key();
            let line = i + 1;
            let log_error = |message: String| RunError::Log { path: log_path.display().to_string(), line, message };
            let &slot =
                index.get(&key).ok_or_else(|| log_error(format!("record for a cell outside the plan: {key:?}")))?;
            if std::mem::replace(&mut done[slot], true) {
                return Err(log_error(format!("duplicate record for {key:?}")));
            }
            counts.add(r.status);
        }

        let mut manifest = RunManifest {
            plan: plan.clone(),
            corpus_digests: self.loaded.corpus_digests(),
            battery_digests: plan.conditions.iter().map(|&c| (c, self.loaded.battery.digest(c))).collect(),
            counts,
            started: self.now(),
            finished: None,
            complete: false,
        };
        self.write_manifest(&dir, &manifest)?;

        let file =
            OpenOptions::new().create(true).write(true).truncate(false).open(&log_path).map_err(io_err(&log_path))?;
        file.set_len(good_len).map_err(io_err(&log_path))?;
        let mut log = OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?;

        let pending: Vec<usize> = (0..cells.len()).filter(|&i| !done[i]).collect();
        log::info!(
            "run {}: {} planned, {} already recorded, {} to go",
            plan.run_id,
            cells.len(),
            cells.len() - pending.len(),
            pending.len()
        );
        let outcome = self.dispatch(&cells, &pending, &mut log, &mut manifest.counts);
        let stopped_early = match outcome {
            Ok(stopped) => stopped,
            Err(e) => {
                let _ = self.write_manifest(&dir, &manifest);
                return Err(e);
            }
        };
        if !stopped_early {
            manifest.finished = Some(self.now());
            manifest.complete = manifest.counts.recorded() == manifest.counts.planned;
        }
        self.write_manifest(&dir, &manifest)?;
        Ok(manifest)
    }

    fn write_manifest(&self, dir: &Path, manifest: &RunManifest) -> Result<(), RunError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        text.push('\n');
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        fs::write(tmp.path(), text).map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| io_err(&path)(e.error))?;
        Ok(())
    }

    /// Workers take pending cells in order; the writer appends records in
    /// that same order, so the log never depends on thread timing. Returns
    /// whether the `stop_after` limit cut the run short.
    fn dispatch(
        &self,
        cells: &[CellKey],
        pending: &[usize],
        log: &mut File,
        counts: &mut RunCounts,
    ) -> Result<bool, RunError> {
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let limit = self.stop_after.unwrap_or(usize::MAX).min(pending.len());
        let workers = self.loaded.plan.parallelism.min(pending.len()).max(1);
        let log_path = self.loaded.plan.run_dir().join(RECORDS_FILE);
        thread::scope(|s| {
            let (tx, rx) = mpsc::channel::<(usize, VoteRecord)>();
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, stop) = (&next, &stop);
                s.spawn(move || loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let slot = next.fetch_add(1, Ordering::Relaxed);
                    if slot >= limit {
                        break;
                    }
                    let record = self.run_cell(&cells[pending[slot]]);
                    if tx.send((slot, record)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut buffered: BTreeMap<usize, VoteRecord> = BTreeMap::new();
            let mut written = 0usize;
            for (slot, record) in rx {
                buffered.insert(slot, record);
                while let Some(record) = buffered.remove(&written) {
                    let mut line = serde_json::to_string(&record).expect("record serializes");
                    line.push('\n');
                    if let Err(e) = log.write_all(line.as_bytes()) {
                        stop.store(true, Ordering::Relaxed);
                        return Err(io_err(&log_path)(e));
                    }
                    counts.add(record.status);
                    written += 1;
                    if written.is_multiple_of(PROGRESS_EVERY) {
                        log::info!("{written}/{} cells recorded", pending.len());
                    }
                }
            }
            log.sync_data().map_err(io_err(&log_path))?;
            Ok(limit < pending.len())
        })
    }

    /// Renders, sends and parses one cell. A reply that fails to parse gets
    /// one repair request; failures become records, never errors.
    fn run_cell(&self, cell: &CellKey) -> VoteRecord {
        let mut record = VoteRecord {
            profile_id: cell.profile_id.clone(),
            policy_id: cell.policy_id.clone(),
            model: cell.model.clone(),
            condition: cell.condition,
            variant_id: cell.variant_id.clone(),
            vote: None,
            utilities: None,
            rationale: String::new(),
            raw_response: None,
            status: RecordStatus::ProviderFailed,
            error: None,
            timestamp: self.now(),
        };
        let prompt = match self.render(cell) {
            Ok(p) => p,
            Err(e) => {
                record.error = Some(e.to_string());
                return record;
            }
        };
        let provider = &self.providers[&cell.model];
        let mut text = prompt.text.clone();
        for attempt in 0..2 {
            let raw = match provider.complete(&text) {
                Ok(raw) => raw,
                // A failed repair request leaves the parse failure standing.
                Err(e) if attempt > 0 => {
                    log::debug!("repair request for {:?} failed: {e}", cell);
                    return record;
                }
                Err(e) => {
                    record.status = RecordStatus::ProviderFailed;
                    record.error = Some(e.to_string());
                    return record;
                }
            };
            match prompts::parse_response(prompt.expects, &raw) {
                Ok(parsed) => {
                    match parsed {
                        Parsed::Vote { vote, rationale } => {
                            record.vote = Some(vote);
                            record.rationale = rationale;
                        }
                        Parsed::Schedule { schedule, rationale } => {
                            record.utilities = Some(schedule);
                            record.rationale = rationale;
                        }
                    }
                    record.status = RecordStatus::Ok;
                    record.error = None;
                    record.raw_response = Some(raw);
                    return record;
                }
                Err(e) => {
                    record.status = RecordStatus::ParseFailed;
                    record.error = Some(e.to_string());
                    record.raw_response = Some(raw);
                    if attempt == 0 {
                        text.push_str(REPAIR_SUFFIX);
                    }
                }
            }
        }
        record
    }

    fn render(&self, cell: &CellKey) -> Result<prompts::RenderedPrompt, RunError> {
        let variant = self
            .loaded
            .battery
            .find(&cell.variant_id)
            .ok_or_else(|| RunError::Plan(format!("unknown prompt variant {}", cell.variant_id)))?;
        let policy = self
            .loaded
            .policies
            .iter()
            .find(|p| p.id == cell.policy_id)
            .ok_or_else(|| RunError::Plan(format!("unknown policy {}", cell.policy_id)))?;
        let bio = match &cell.profile_id {
            Some(id) => Some(
                self.loaded
                    .profiles
                    .iter()
                    .find(|p| &p.id == id)
                    .map(|p| p.biography.as_str())
                    .ok_or_else(|| RunError::Plan(format!("unknown profile {id}")))?,
            ),
            None => None,
        };
        Ok(prompts::render(variant, bio, policy)?)
    }
}

pub fn execute(plan: RunPlan) -> Result<RunManifest, RunError> {
    Executor::new(LoadedPlan::load(plan)?)?.run()
}

/// Continues the run stored under `runs_dir/run_id`, skipping recorded cells.
pub fn resume(runs_dir: &Path, run_id: &str) -> Result<RunManifest, RunError> {
    let mut plan = RunPlan::from_file(&runs_dir.join(run_id).join(PLAN_FILE))?;
    plan.resume = true;
    execute(plan)
}

/// Recomputes counts from a record log, for checking a manifest against it.
pub fn count_records(records: &[VoteRecord], planned: usize) -> RunCounts {
    let mut counts = RunCounts { planned, ..Default::default() };
    for r in records {
        counts.add(r.status);
    }
    counts
}

/// Policy lookup by id.
pub fn policy_map(policies: &[Policy]) -> HashMap<&PolicyId, &Policy> {
    policies.iter().map(|p| (&p.id, p)).collect()
}
