//! Agreement metrics over a run's record log.
//!
//! Trustee records hold utility schedules, so votes are derived here, once
//! per lambda. Failed records never reach a numerator or a denominator.
//! Set-level rates ("contested", "consensus") weight every statement
//! equally: per-policy rates are averaged, then averaged over variants.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{check_grid, trustee_vote, AggregationError, TrusteeMethod};
use crate::domain::{
    Condition, DemographicField, DomainError, PairId, Policy, PolicyCategory, PolicyId, ProfileId, Vote, VoteRecord,
    VoterProfile,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("no eligible votes: {0}")]
    Empty(String),
    #[error("no reference stance for {policy} under model {model}")]
    MissingReference { model: String, policy: PolicyId },
    #[error("unknown policy {0}")]
    UnknownPolicy(PolicyId),
    #[error("unknown profile {0}")]
    UnknownProfile(String),
    #[error("policy {0} is contested; expert alignment needs consensus policies")]
    ContestedPolicy(PolicyId),
    #[error("votes mix {0}")]
    Mixed(String),
    #[error("reports are not comparable: {0}")]
    ScopeMismatch(String),
    #[error("duplicate vote for {0}")]
    Duplicate(String),
    #[error("bad record: {0}")]
    Record(String),
    #[error(transparent)]
    Field(#[from] DomainError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    ModelDefault,
    ExpertConsensus,
}

impl Reference {
    pub fn as_str(self) -> &'static str {
        match self {
            Reference::ModelDefault => "model_default",
            Reference::ExpertConsensus => "expert_consensus",
        }
    }
}

impl FromStr for Reference {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "default" | "model_default" => Ok(Reference::ModelDefault),
            "expert" | "expert_consensus" => Ok(Reference::ExpertConsensus),
            _ => Err(format!("unknown reference `{s}`; expected default or expert")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerPolicy,
    PerPolicyPair,
    Aggregate,
    PerGroup,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::PerPolicy, Scope::PerPolicyPair, Scope::Aggregate, Scope::PerGroup];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::PerPolicy => "per_policy",
            Scope::PerPolicyPair => "per_policy_pair",
            Scope::Aggregate => "aggregate",
            Scope::PerGroup => "per_group",
        }
    }
}

/// How trustee votes are grouped. `Combined` pools both temporal models'
/// votes; `MeanOfMethods` averages the two models' rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrusteeArm {
    Exponential,
    Dual,
    Combined,
    MeanOfMethods,
}

impl From<TrusteeMethod> for TrusteeArm {
    fn from(m: TrusteeMethod) -> Self {
        match m {
            TrusteeMethod::Exponential => TrusteeArm::Exponential,
            TrusteeMethod::Dual => TrusteeArm::Dual,
        }
    }
}

/// The condition a vote was cast under; trustee votes also carry lambda.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arm {
    Default,
    Delegate,
    Trustee { method: TrusteeArm, lambda: f64 },
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Default => "default",
            Arm::Delegate => "delegate",
            Arm::Trustee { method: TrusteeArm::Exponential, .. } => "trustee_exponential",
            Arm::Trustee { method: TrusteeArm::Dual, .. } => "trustee_dual",
            Arm::Trustee { method: TrusteeArm::Combined, .. } => "trustee_combined",
            Arm::Trustee { method: TrusteeArm::MeanOfMethods, .. } => "trustee_mean",
        }
    }

    pub fn lambda(self) -> Option<f64> {
        match self {
            Arm::Trustee { lambda, .. } => Some(lambda),
            _ => None,
        }
    }

    pub fn is_trustee(self) -> bool {
        matches!(self, Arm::Trustee { .. })
    }

    /// Inverse of `name` plus `lambda`.
    pub fn parse(name: &str, lambda: Option<f64>) -> Result<Arm, String> {
        let method = match name {
            "default" | "delegate" if lambda.is_some() => return Err(format!("{name} takes no lambda")),
            "default" => return Ok(Arm::Default),
            "delegate" => return Ok(Arm::Delegate),
            "trustee_exponential" => TrusteeArm::Exponential,
            "trustee_dual" => TrusteeArm::Dual,
            "trustee_combined" => TrusteeArm::Combined,
            "trustee_mean" => TrusteeArm::MeanOfMethods,
            _ => return Err(format!("unknown condition `{name}`")),
        };
        let lambda = lambda.ok_or_else(|| format!("{name} needs a lambda"))?;
        Ok(Arm::Trustee { method, lambda })
    }

    fn rank(self) -> (u8, Option<TrusteeArm>, f64) {
        match self {
            Arm::Default => (0, None, 0.0),
            Arm::Delegate => (1, None, 0.0),
            Arm::Trustee { method, lambda } => (2, Some(method), lambda),
        }
    }
}

impl Eq for Arm {}

impl Ord for Arm {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.rank(), other.rank());
        a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2))
    }
}

impl PartialOrd for Arm {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lambda() {
            Some(l) => write!(f, "{}@{l}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// One vote, as analytics sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ballot {
    pub model: String,
    pub arm: Arm,
    pub variant_id: String,
    pub profile_id: Option<ProfileId>,
    pub policy_id: PolicyId,
    pub vote: Vote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub scope: Scope,
    /// Policy id, pair id, `field=category`, a policy-set name or `pooled`.
    pub subject: String,
    pub reference: Reference,
    pub model: String,
    pub arm: Arm,
    /// `None` when votes from several prompt variants are combined.
    pub variant: Option<String>,
    pub rate: f64,
    pub n: usize,
}

/// Reference stance per (model, policy). Expert stances are shared by all
/// models; default votes are per model.
#[derive(Debug, Clone, PartialEq)]
pub struct StanceMap {
    pub reference: Reference,
    shared: BTreeMap<PolicyId, Vote>,
    by_model: BTreeMap<String, BTreeMap<PolicyId, Vote>>,
}

impl StanceMap {
    pub fn expert(policies: &[Policy]) -> Self {
        let shared = policies.iter().filter_map(|p| p.expert_stance.map(|v| (p.id.clone(), v))).collect();
        StanceMap { reference: Reference::ExpertConsensus, shared, by_model: BTreeMap::new() }
    }

    /// The default votes tabulated in the corpus.
    pub fn corpus_defaults(policies: &[Policy]) -> Self {
        let mut by_model: BTreeMap<String, BTreeMap<PolicyId, Vote>> = BTreeMap::new();
        for p in policies {
            for (model, &v) in &p.model_defaults {
                by_model.entry(model.clone()).or_default().insert(p.id.clone(), v);
            }
        }
        StanceMap { reference: Reference::ModelDefault, shared: BTreeMap::new(), by_model }
    }

    /// Default votes observed in the run, falling back to the corpus table
    /// where the run has none. With several Default variants the
    /// lexicographically first variant wins.
    pub fn run_defaults(records: &[VoteRecord], policies: &[Policy]) -> Self {
        let mut map = Self::corpus_defaults(policies);
        let mut observed: BTreeMap<(&str, &PolicyId), (&str, Vote)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.is_ok() && r.condition == Condition::Default) {
            if let Some(v) = r.vote {
                let slot = observed.entry((r.model.as_str(), &r.policy_id)).or_insert((r.variant_id.as_str(), v));
                if r.variant_id.as_str() < slot.0 {
                    *slot = (r.variant_id.as_str(), v);
                }
            }
        }
        for ((model, policy), (_, v)) in observed {
            map.by_model.entry(model.to_string()).or_default().insert(policy.clone(), v);
        }
        map
    }

    pub fn from_shared(reference: Reference, stances: BTreeMap<PolicyId, Vote>) -> Self {
        StanceMap { reference, shared: stances, by_model: BTreeMap::new() }
    }

    pub fn insert(&mut self, model: &str, policy: PolicyId, vote: Vote) {
        self.by_model.entry(model.to_string()).or_default().insert(policy, vote);
    }

    pub fn stance(&self, model: &str, policy: &PolicyId) -> Option<Vote> {
        self.by_model.get(model).and_then(|m| m.get(policy)).or_else(|| self.shared.get(policy)).copied()
    }
}

/// Votes from `ok` records. Each trustee schedule yields one vote per
/// lambda in `grid`.
pub fn ballots_from_records(records: &[VoteRecord], grid: &[f64]) -> Result<Vec<Ballot>, AnalyticsError> {
    let mut out = Vec::new();
    let mut grid_checked = false;
    for r in records.iter().filter(|r| r.is_ok()) {
        let ballot = |arm: Arm, vote: Vote| Ballot {
            model: r.model.clone(),
            arm,
            variant_id: r.variant_id.clone(),
            profile_id: r.profile_id.clone(),
            policy_id: r.policy_id.clone(),
            vote,
        };
        match (r.condition, r.vote, &r.utilities) {
            (Condition::Default, Some(v), None) => out.push(ballot(Arm::Default, v)),
            (Condition::Delegate, Some(v), None) => out.push(ballot(Arm::Delegate, v)),
            (c, None, Some(s)) if c.is_trustee() && s.condition() == c => {
                if !grid_checked {
                    check_grid(grid)?;
                    grid_checked = true;
                }
                for &lambda in grid {
                    let (vote, u) = trustee_vote(s, lambda)?;
                    out.push(ballot(Arm::Trustee { method: u.method.into(), lambda }, vote));
                }
            }
            _ => return Err(AnalyticsError::Record(format!("{:?} is inconsistent", r.key()))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub matches: usize,
    pub n: usize,
}

impl Tally {
    pub fn rate(self) -> f64 {
        self.matches as f64 / self.n as f64
    }

    fn add(&mut self, agree: bool) {
        self.n += 1;
        self.matches += usize::from(agree);
    }
}

fn agrees(b: &Ballot, stances: &StanceMap) -> Result<bool, AnalyticsError> {
    stances
        .stance(&b.model, &b.policy_id)
        .map(|s| s == b.vote)
        .ok_or_else(|| AnalyticsError::MissingReference { model: b.model.clone(), policy: b.policy_id.clone() })
}

fn common<'a, T: PartialEq + 'a>(mut items: impl Iterator<Item = &'a T>) -> Option<&'a T> {
    let first = items.next()?;
    items.all(|x| x == first).then_some(first)
}

/// Fraction of `ballots` matching the reference stance. Report labels are
/// taken from the ballots: a single policy gives a per-policy report,
/// anything wider a pooled aggregate.
pub fn agreement_rate(ballots: &[Ballot], stances: &StanceMap) -> Result<AgreementReport, AnalyticsError> {
    if ballots.is_empty() {
        return Err(AnalyticsError::Empty("agreement rate over zero votes".into()));
    }
    let mut tally = Tally::default();
    for b in ballots {
        tally.add(agrees(b, stances)?);
    }
    let arm = match common(ballots.iter().map(|b| &b.arm)) {
        Some(&arm) => arm,
        None => {
            let lambdas: BTreeSet<u64> = ballots.iter().filter_map(|b| b.arm.lambda()).map(f64::to_bits).collect();
            match (ballots.iter().all(|b| b.arm.is_trustee()), lambdas.len()) {
                (true, 1) => Arm::Trustee { method: TrusteeArm::Combined, lambda: ballots[0].arm.lambda().unwrap() },
                _ => return Err(AnalyticsError::Mixed("conditions or lambdas".into())),
            }
        }
    };
    let (scope, subject) = match common(ballots.iter().map(|b| &b.policy_id)) {
        Some(p) => (Scope::PerPolicy, p.to_string()),
        None => (Scope::Aggregate, "pooled".to_string()),
    };
    Ok(AgreementReport {
        scope,
        subject,
        reference: stances.reference,
        model: common(ballots.iter().map(|b| &b.model)).cloned().unwrap_or_else(|| "all".into()),
        arm,
        variant: common(ballots.iter().map(|b| &b.variant_id)).cloned(),
        rate: tally.rate(),
        n: tally.n,
    })
}

/// Agreement with the expert consensus; every ballot must concern a
/// consensus policy.
pub fn expert_alignment(ballots: &[Ballot], policies: &[Policy]) -> Result<AgreementReport, AnalyticsError> {
    let by_id: HashMap<&PolicyId, &Policy> = policies.iter().map(|p| (&p.id, p)).collect();
    for b in ballots {
        let p = by_id.get(&b.policy_id).ok_or_else(|| AnalyticsError::UnknownPolicy(b.policy_id.clone()))?;
        if p.category != PolicyCategory::Consensus {
            return Err(AnalyticsError::ContestedPolicy(p.id.clone()));
        }
    }
    agreement_rate(ballots, &StanceMap::expert(policies))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySet {
    Contested,
    Consensus,
    All,
}

impl PolicySet {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicySet::Contested => "contested",
            PolicySet::Consensus => "consensus",
            PolicySet::All => "all",
        }
    }

    pub fn contains(self, category: PolicyCategory) -> bool {
        match self {
            PolicySet::Contested => category == PolicyCategory::Contested,
            PolicySet::Consensus => category == PolicyCategory::Consensus,
            PolicySet::All => true,
        }
    }
}

impl FromStr for PolicySet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [PolicySet::Contested, PolicySet::Consensus, PolicySet::All]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown policy set `{s}`"))
    }
}

/// Set-level rate: per-policy rates averaged within each variant, then
/// averaged over variants. Returns the rate and the number of votes.
pub fn set_rate(
    ballots: &[Ballot],
    policies: &[Policy],
    stances: &StanceMap,
    set: PolicySet,
) -> Result<(f64, usize), AnalyticsError> {
    let by_id: HashMap<&PolicyId, &Policy> = policies.iter().map(|p| (&p.id, p)).collect();
    let mut tallies: BTreeMap<&str, BTreeMap<&PolicyId, Tally>> = BTreeMap::new();
    for b in ballots {
        let p = by_id.get(&b.policy_id).ok_or_else(|| AnalyticsError::UnknownPolicy(b.policy_id.clone()))?;
        if set.contains(p.category) {
            let agree = agrees(b, stances)?;
            tallies.entry(&b.variant_id).or_default().entry(&b.policy_id).or_default().add(agree);
        }
    }
    if tallies.is_empty() {
        return Err(AnalyticsError::Empty(format!("no votes on {} policies", set.as_str())));
    }
    let n = tallies.values().flat_map(|m| m.values()).map(|t| t.n).sum();
    let variant_rates: Vec<f64> =
        tallies.values().map(|m| m.values().map(|t| t.rate()).sum::<f64>() / m.len() as f64).collect();
    Ok((variant_rates.iter().sum::<f64>() / variant_rates.len() as f64, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMethod {
    Exponential,
    Dual,
    MeanOfMethods,
}

impl CurveMethod {
    pub const ALL: [CurveMethod; 3] = [CurveMethod::Exponential, CurveMethod::Dual, CurveMethod::MeanOfMethods];

    pub fn arm(self) -> TrusteeArm {
        match self {
            CurveMethod::Exponential => TrusteeArm::Exponential,
            CurveMethod::Dual => TrusteeArm::Dual,
            CurveMethod::MeanOfMethods => TrusteeArm::MeanOfMethods,
        }
    }

    pub fn from_arm(arm: TrusteeArm) -> Option<Self> {
        match arm {
            TrusteeArm::Exponential => Some(CurveMethod::Exponential),
            TrusteeArm::Dual => Some(CurveMethod::Dual),
            TrusteeArm::MeanOfMethods => Some(CurveMethod::MeanOfMethods),
            TrusteeArm::Combined => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CurveMethod::Exponential => "exponential",
            CurveMethod::Dual => "dual",
            CurveMethod::MeanOfMethods => "mean_of_methods",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub rate: f64,
    pub n: usize,
}

/// Agreement as a function of lambda. `variant` is `None` for the mean
/// over prompt variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCurve {
    pub model: String,
    pub policy_set: PolicySet,
    pub method: CurveMethod,
    pub reference: Reference,
    pub variant: Option<String>,
    pub points: Vec<CurvePoint>,
}

impl AlphaCurve {
    pub fn lambdas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaCurves {
    pub mean: AlphaCurve,
    pub variants: Vec<AlphaCurve>,
}

fn method_curves(
    ballots: &[Ballot],
    policies: &[Policy],
    stances: &StanceMap,
    set: PolicySet,
    grid: &[f64],
    head: &AlphaCurve,
) -> Result<AlphaCurves, AnalyticsError> {
    let variants: BTreeSet<&str> = ballots.iter().map(|b| b.variant_id.as_str()).collect();
    let at = |lambda: f64, variant: Option<&str>| -> Vec<Ballot> {
        ballots
            .iter()
            .filter(|b| b.arm.lambda() == Some(lambda) && variant.is_none_or(|v| b.variant_id == v))
            .cloned()
            .collect()
    };
    let curve = |variant: Option<&str>| -> Result<AlphaCurve, AnalyticsError> {
        let mut points = Vec::with_capacity(grid.len());
        for &lambda in grid {
            let (rate, n) = set_rate(&at(lambda, variant), policies, stances, set)?;
            points.push(CurvePoint { lambda, rate, n });
        }
        Ok(AlphaCurve { variant: variant.map(str::to_string), points, ..head.clone() })
    };
    Ok(AlphaCurves {
        mean: curve(None)?,
        variants: variants.into_iter().map(|v| curve(Some(v))).collect::<Result<_, _>>()?,
    })
}

/// Agreement of one model's trustee votes at each lambda of `grid`, per
/// prompt variant and as the variant mean. `MeanOfMethods` averages the
/// exponential and short/long means pointwise and keeps both methods'
/// variant curves.
pub fn alpha_curve(
    records: &[VoteRecord],
    policies: &[Policy],
    stances: &StanceMap,
    set: PolicySet,
    method: CurveMethod,
    grid: &[f64],
) -> Result<AlphaCurves, AnalyticsError> {
    check_grid(grid)?;
    if records.iter().any(|r| !r.condition.is_trustee()) {
        return Err(AnalyticsError::Mixed("trustee and non-trustee records".into()));
    }
    let model = match common(records.iter().map(|r| &r.model)) {
        Some(m) => m.clone(),
        None if records.is_empty() => return Err(AnalyticsError::Empty("alpha curve over zero records".into())),
        None => return Err(AnalyticsError::Mixed("models".into())),
    };
    let ballots = ballots_from_records(records, grid)?;
    let head =
        AlphaCurve { model, policy_set: set, method, reference: stances.reference, variant: None, points: Vec::new() };
    let of = |m: TrusteeArm| -> Vec<Ballot> {
        ballots.iter().filter(|b| matches!(b.arm, Arm::Trustee { method, .. } if method == m)).cloned().collect()
    };
    match method {
        CurveMethod::Exponential | CurveMethod::Dual => {
            method_curves(&of(method.arm()), policies, stances, set, grid, &head)
        }
        CurveMethod::MeanOfMethods => {
            let e = method_curves(&of(TrusteeArm::Exponential), policies, stances, set, grid, &head)?;
            let d = method_curves(&of(TrusteeArm::Dual), policies, stances, set, grid, &head)?;
            let points = e
                .mean
                .points
                .iter()
                .zip(&d.mean.points)
                .map(|(a, b)| CurvePoint { lambda: a.lambda, rate: (a.rate + b.rate) / 2.0, n: a.n + b.n })
                .collect();
            let mut variants = e.variants;
            variants.extend(d.variants);
            Ok(AlphaCurves { mean: AlphaCurve { points, ..head }, variants })
        }
    }
}

/// Pooled agreement per category of `field` (a demographics field name or
/// `income_bucket`). Categories without votes are omitted.
pub fn subgroup_agreement(
    ballots: &[Ballot],
    profiles: &[VoterProfile],
    stances: &StanceMap,
    field: &str,
) -> Result<Vec<AgreementReport>, AnalyticsError> {
    let field: DemographicField = field.parse()?;
    let by_id: HashMap<&ProfileId, &VoterProfile> = profiles.iter().map(|p| (&p.id, p)).collect();
    let mut groups: BTreeMap<String, Vec<Ballot>> = BTreeMap::new();
    for b in ballots {
        let id = b.profile_id.as_ref().ok_or_else(|| AnalyticsError::UnknownProfile("(none)".into()))?;
        let p = by_id.get(id).ok_or_else(|| AnalyticsError::UnknownProfile(id.to_string()))?;
        groups.entry(p.demographics.value_of(field)).or_default().push(b.clone());
    }
    let mut out = Vec::new();
    for category in field.categories() {
        if let Some(group) = groups.get(&category) {
            let mut r = agreement_rate(group, stances)?;
            r.scope = Scope::PerGroup;
            r.subject = format!("{}={category}", field.name());
            out.push(r);
        }
    }
    Ok(out)
}

/// Trustee rate minus delegate rate for reports over the same subject.
pub fn trustee_delegate_gap(delegate: &AgreementReport, trustee: &AgreementReport) -> Result<f64, AnalyticsError> {
    let mismatch = |what: &str| Err(AnalyticsError::ScopeMismatch(what.to_string()));
    if delegate.arm != Arm::Delegate {
        return mismatch("first report is not a delegate report");
    }
    if !trustee.arm.is_trustee() && trustee.arm != Arm::Delegate {
        return mismatch("second report is not a trustee report");
    }
    if delegate.model != trustee.model {
        return mismatch("models differ");
    }
    if delegate.scope != trustee.scope || delegate.subject != trustee.subject {
        return mismatch("subjects differ");
    }
    if delegate.reference != trustee.reference {
        return mismatch("references differ");
    }
    Ok(trustee.rate - delegate.rate)
}

/// A tuple (profile, model, condition with lambda, variant, pair) is
/// consistent when its votes on the two phrasings differ.
pub fn paraphrase_tally(ballots: &[Ballot], policies: &[Policy]) -> Result<Tally, AnalyticsError> {
    let by_id: HashMap<&PolicyId, &Policy> = policies.iter().map(|p| (&p.id, p)).collect();
    type TupleKey<'a> = (Option<&'a ProfileId>, &'a str, Arm, &'a str, &'a PairId);
    let mut tuples: BTreeMap<TupleKey<'_>, BTreeMap<&PolicyId, Vote>> = BTreeMap::new();
    for b in ballots {
        let p = by_id.get(&b.policy_id).ok_or_else(|| AnalyticsError::UnknownPolicy(b.policy_id.clone()))?;
        let key = (b.profile_id.as_ref(), b.model.as_str(), b.arm, b.variant_id.as_str(), &p.pair_id);
        if tuples.entry(key).or_default().insert(&b.policy_id, b.vote).is_some() {
            return Err(AnalyticsError::Duplicate(format!("{} / {} / {}", b.model, b.arm, b.policy_id)));
        }
    }
    let mut tally = Tally::default();
    for votes in tuples.values().filter(|v| v.len() == 2) {
        let mut it = votes.values();
        tally.add(it.next() != it.next());
    }
    Ok(tally)
}

pub fn paraphrase_consistency(ballots: &[Ballot], policies: &[Policy]) -> Result<f64, AnalyticsError> {
    let tally = paraphrase_tally(ballots, policies)?;
    if tally.n == 0 {
        return Err(AnalyticsError::Empty("no phrasing pair has both votes".into()));
    }
    Ok(tally.rate())
}

// ---------------------------------------------------------------------------
// Whole-run analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Policy,
    Pair,
    Group(DemographicField),
}

impl GroupBy {
    /// File stem used for this breakdown.
    pub fn stem(self) -> String {
        match self {
            GroupBy::Policy => "by_policy".into(),
            GroupBy::Pair => "by_pair".into(),
            GroupBy::Group(f) => format!("by_group_{}", f.name()),
        }
    }
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "policy" => Ok(GroupBy::Policy),
            "pair" => Ok(GroupBy::Pair),
            _ => match s.strip_prefix("group:") {
                Some(f) => f.parse().map(GroupBy::Group).map_err(|e: DomainError| e.to_string()),
                None => Err(format!("unknown grouping `{s}`; expected policy, pair or group:<field>")),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub reference: Reference,
    pub by: GroupBy,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub model: String,
    pub condition: String,
    pub lambda: Option<f64>,
    pub rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Pooled rates per subject of the requested breakdown.
    pub breakdown: Vec<AgreementReport>,
    /// Set-level curve points plus the delegate baseline per set.
    pub curves: Vec<AgreementReport>,
    pub consistency: Vec<ConsistencyRow>,
}

/// Breakdown arms for a ballot: its own arm, plus the pooled trustee arm.
fn arms_of(arm: Arm) -> impl Iterator<Item = Arm> {
    let combined = match arm {
        Arm::Trustee { lambda, .. } => Some(Arm::Trustee { method: TrusteeArm::Combined, lambda }),
        _ => None,
    };
    std::iter::once(arm).chain(combined)
}

pub fn curve_rows(curves: &AlphaCurves) -> Vec<AgreementReport> {
    std::iter::once(&curves.mean)
        .chain(&curves.variants)
        .flat_map(|c| {
            c.points.iter().map(move |p| AgreementReport {
                scope: Scope::Aggregate,
                subject: c.policy_set.as_str().to_string(),
                reference: c.reference,
                model: c.model.clone(),
                arm: Arm::Trustee { method: c.method.arm(), lambda: p.lambda },
                variant: c.variant.clone(),
                rate: p.rate,
                n: p.n,
            })
        })
        .collect()
}

/// Every output of `analyze` is a pure function of the record set: record
/// order does not matter.
pub fn analyze(
    records: &[VoteRecord],
    policies: &[Policy],
    profiles: &[VoterProfile],
    config: &AnalysisConfig,
) -> Result<Analysis, AnalyticsError> {
    check_grid(&config.grid)?;
    let stances = match config.reference {
        Reference::ModelDefault => StanceMap::run_defaults(records, policies),
        Reference::ExpertConsensus => StanceMap::expert(policies),
    };
    let by_id: HashMap<&PolicyId, &Policy> = policies.iter().map(|p| (&p.id, p)).collect();
    let mut records: Vec<VoteRecord> = records.to_vec();
    records.sort_by_cached_key(VoteRecord::key);
    let all_ballots = ballots_from_records(&records, &config.grid)?;

    let mut missing = 0usize;
    let ballots: Vec<Ballot> = all_ballots
        .iter()
        .filter(|b| !(config.reference == Reference::ModelDefault && b.arm == Arm::Default))
        .filter(|b| {
            let known = stances.stance(&b.model, &b.policy_id).is_some();
            missing += usize::from(!known);
            known
        })
        .cloned()
        .collect();
    if missing > 0 {
        log::warn!("{missing} vote(s) have no {} stance and are left out", config.reference.as_str());
    }

    // Breakdown: pooled tallies per (model, arm, subject).
    let subject_of = |b: &Ballot| -> Result<String, AnalyticsError> {
        Ok(match config.by {
            GroupBy::Policy => b.policy_id.to_string(),
            GroupBy::Pair => by_id
                .get(&b.policy_id)
                .ok_or_else(|| AnalyticsError::UnknownPolicy(b.policy_id.clone()))?
                .pair_id
                .to_string(),
            GroupBy::Group(_) => String::new(),
        })
    };
    let mut breakdown = Vec::new();
    match config.by {
        GroupBy::Group(field) => {
            let mut groups: BTreeMap<(&str, Arm), Vec<Ballot>> = BTreeMap::new();
            for b in ballots.iter().filter(|b| b.profile_id.is_some()) {
                for arm in arms_of(b.arm) {
                    groups.entry((&b.model, arm)).or_default().push(Ballot { arm, ..b.clone() });
                }
            }
            for group in groups.values() {
                breakdown.extend(subgroup_agreement(group, profiles, &stances, field.name())?.into_iter().map(
                    |mut r| {
                        r.variant = None;
                        r
                    },
                ));
            }
        }
        GroupBy::Policy | GroupBy::Pair => {
            let order: Vec<String> = match config.by {
                GroupBy::Policy => policies.iter().map(|p| p.id.to_string()).collect(),
                _ => {
                    let mut seen = BTreeSet::new();
                    policies.iter().filter(|p| seen.insert(&p.pair_id)).map(|p| p.pair_id.to_string()).collect()
                }
            };
            let position: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut tallies: BTreeMap<(&str, Arm, usize), Tally> = BTreeMap::new();
            for b in &ballots {
                let subject = subject_of(b)?;
                let pos = *position
                    .get(subject.as_str())
                    .ok_or_else(|| AnalyticsError::UnknownPolicy(b.policy_id.clone()))?;
                let agree = agrees(b, &stances)?;
                for arm in arms_of(b.arm) {
                    tallies.entry((&b.model, arm, pos)).or_default().add(agree);
                }
            }
            let scope = if config.by == GroupBy::Policy { Scope::PerPolicy } else { Scope::PerPolicyPair };
            for ((model, arm, pos), t) in tallies {
                breakdown.push(AgreementReport {
                    scope,
                    subject: order[pos].clone(),
                    reference: stances.reference,
                    model: model.to_string(),
                    arm,
                    variant: None,
                    rate: t.rate(),
                    n: t.n,
                });
            }
        }
    }

    // Curves and delegate baselines per model and policy set.
    let models: BTreeSet<&str> = records.iter().map(|r| r.model.as_str()).collect();
    let sets: &[PolicySet] = match config.reference {
        Reference::ModelDefault => &[PolicySet::Contested, PolicySet::Consensus],
        Reference::ExpertConsensus => &[PolicySet::Consensus],
    };
    let mut curves = Vec::new();
    for &model in &models {
        for &set in sets {
            let delegate: Vec<Ballot> =
                ballots.iter().filter(|b| b.model == model && b.arm == Arm::Delegate).cloned().collect();
            if let Ok((rate, n)) = set_rate(&delegate, policies, &stances, set) {
                curves.push(AgreementReport {
                    scope: Scope::Aggregate,
                    subject: set.as_str().into(),
                    reference: stances.reference,
                    model: model.into(),
                    arm: Arm::Delegate,
                    variant: None,
                    rate,
                    n,
                });
            }
            let trustee: Vec<VoteRecord> = records
                .iter()
                .filter(|r| {
                    r.model == model
                        && r.condition.is_trustee()
                        && r.is_ok()
                        && by_id.get(&r.policy_id).is_some_and(|p| set.contains(p.category))
                        && stances.stance(model, &r.policy_id).is_some()
                })
                .cloned()
                .collect();
            for method in CurveMethod::ALL {
                match alpha_curve(&trustee, policies, &stances, set, method, &config.grid) {
                    Ok(c) => curves.extend(curve_rows(&c)),
                    Err(AnalyticsError::Empty(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }

    // Phrasing consistency per model and condition.
    let mut groups: BTreeMap<(&str, Arm), Vec<Ballot>> = BTreeMap::new();
    for b in &all_ballots {
        groups.entry((&b.model, b.arm)).or_default().push(b.clone());
    }
    let mut consistency = Vec::new();
    for ((model, arm), group) in groups {
        let t = paraphrase_tally(&group, policies)?;
        if t.n > 0 {
            consistency.push(ConsistencyRow {
                model: model.into(),
                condition: arm.name().into(),
                lambda: arm.lambda(),
                rate: t.rate(),
                n: t.n,
            });
        }
    }
    Ok(Analysis { breakdown, curves, consistency })
}
