//! Shared vocabulary: voter profiles, policies, conditions, utility schedules
//! and vote records.
//!
//! Every value here is immutable once built and validated on deserialization,
//! so anything read from disk already satisfies its invariants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("unknown {kind} category `{value}`")]
    UnknownCategory { kind: &'static str, value: String },
    #[error("unknown demographics field `{0}`")]
    UnknownField(String),
    #[error("household size {0} outside [1, 20]")]
    HouseholdSize(u32),
    #[error("utility score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("biography is empty")]
    EmptyBiography,
    #[error("record invariant violated: {0}")]
    Record(String),
}

macro_rules! categorical {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $label)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = DomainError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|c| c.label() == s)
                    .ok_or_else(|| DomainError::UnknownCategory { kind: $kind, value: s.to_string() })
            }
        }
    };
}

categorical!(Gender, "gender" { Female => "Female", Male => "Male" });
categorical!(Race, "race" {
    White => "White",
    HispanicLatino => "Hispanic/Latino",
    Black => "Black/African American",
    Other => "Other",
    Asian => "Asian",
});
categorical!(AgeGroup, "age_group" {
    From18To24 => "18-24",
    From25To34 => "25-34",
    From35To44 => "35-44",
    From45To54 => "45-54",
    From55To64 => "55-64",
    Over65 => "65+",
});
categorical!(PoliticalAffiliation, "political_affiliation" {
    Democrat => "Democrat",
    Republican => "Republican",
    Independent => "Independent",
});
categorical!(Religion, "religion" {
    Protestant => "Protestant/Other Christian",
    Unaffiliated => "Unaffiliated (None)",
    Catholic => "Catholic",
    OtherReligion => "Other religions",
    Jewish => "Jewish",
});
categorical!(Occupation, "occupation" {
    Management => "Mgmt/business/science/arts",
    Production => "Production/transport/materials",
    SalesOffice => "Sales/office",
    Service => "Service",
    Construction => "Natural resources/construction",
});
categorical!(
    /// Storage-level income brackets; see [`IncomeBucket`] for the reporting cut.
    IncomeBracket, "income_bracket" {
    Under30k => "under-30k",
    From30To49k => "30-49k",
    From50To99k => "50-99k",
    From100To199k => "100-199k",
    Over200k => "over-200k",
});
categorical!(HousingStatus, "housing_status" {
    Own => "Own",
    Rent => "Rent",
    WithFamily => "Live with family",
    Other => "Other",
});
categorical!(Region, "region" {
    Northeast => "Northeast",
    Midwest => "Midwest",
    South => "South",
    West => "West",
});
categorical!(Education, "education" {
    HighSchool => "High school or less",
    SomeCollege => "Some college, no degree",
    Associate => "Associate degree",
    Bachelor => "Bachelor's degree",
    Graduate => "Graduate/professional degree",
});
categorical!(Language, "language" {
    EnglishOnly => "English only",
    Spanish => "Spanish",
    OtherLanguages => "Other languages",
    OtherIndoEuropean => "Other Indo-European",
});
categorical!(MaritalStatus, "marital_status" {
    Married => "Married",
    NeverMarried => "Never married",
    Divorced => "Divorced",
});
categorical!(HealthStatus, "health_status" {
    Good => "Good",
    Fair => "Fair",
    Poor => "Poor",
});
categorical!(
    /// Coarse income buckets used for subgroup reporting.
    IncomeBucket, "income_bucket" {
    Under50k => "<50K",
    From50To99k => "50-99K",
    Over100k => ">100K",
});

impl IncomeBracket {
    pub fn bucket(self) -> IncomeBucket {
        match self {
            IncomeBracket::Under30k | IncomeBracket::From30To49k => IncomeBucket::Under50k,
            IncomeBracket::From50To99k => IncomeBucket::From50To99k,
            IncomeBracket::From100To199k | IncomeBracket::Over200k => IncomeBucket::Over100k,
        }
    }
}

pub const MAX_HOUSEHOLD_SIZE: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct HouseholdSize(u32);

impl HouseholdSize {
    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for HouseholdSize {
    type Error = DomainError;

    fn try_from(n: u32) -> Result<Self, Self::Error> {
        if (1..=MAX_HOUSEHOLD_SIZE).contains(&n) {
            Ok(HouseholdSize(n))
        } else {
            Err(DomainError::HouseholdSize(n))
        }
    }
}

impl From<HouseholdSize> for u32 {
    fn from(h: HouseholdSize) -> u32 {
        h.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demographics {
    pub gender: Gender,
    pub race: Race,
    pub age_group: AgeGroup,
    pub political_affiliation: PoliticalAffiliation,
    pub religion: Religion,
    pub household_size: HouseholdSize,
    pub occupation: Occupation,
    pub income_bracket: IncomeBracket,
    pub housing_status: HousingStatus,
    pub region: Region,
    pub education: Education,
    pub language: Language,
    pub marital_status: MaritalStatus,
    pub health_status: HealthStatus,
}

/// A field that profiles can be grouped by. `IncomeBucket` is derived from
/// `income_bracket` rather than stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DemographicField {
    Gender,
    Race,
    AgeGroup,
    PoliticalAffiliation,
    Religion,
    HouseholdSize,
    Occupation,
    IncomeBracket,
    HousingStatus,
    Region,
    Education,
    Language,
    MaritalStatus,
    HealthStatus,
    IncomeBucket,
}

impl DemographicField {
    /// The fourteen stored fields, in schema order.
    pub const STORED: [DemographicField; 14] = [
        DemographicField::Gender,
        DemographicField::Race,
        DemographicField::AgeGroup,
        DemographicField::PoliticalAffiliation,
        DemographicField::Religion,
        DemographicField::HouseholdSize,
        DemographicField::Occupation,
        DemographicField::IncomeBracket,
        DemographicField::HousingStatus,
        DemographicField::Region,
        DemographicField::Education,
        DemographicField::Language,
        DemographicField::MaritalStatus,
        DemographicField::HealthStatus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemographicField::Gender => "gender",
            DemographicField::Race => "race",
            DemographicField::AgeGroup => "age_group",
            DemographicField::PoliticalAffiliation => "political_affiliation",
            DemographicField::Religion => "religion",
            DemographicField::HouseholdSize => "household_size",
            DemographicField::Occupation => "occupation",
            DemographicField::IncomeBracket => "income_bracket",
            DemographicField::HousingStatus => "housing_status",
            DemographicField::Region => "region",
            DemographicField::Education => "education",
            DemographicField::Language => "language",
            DemographicField::MaritalStatus => "marital_status",
            DemographicField::HealthStatus => "health_status",
            DemographicField::IncomeBucket => "income_bucket",
        }
    }

    /// Every category label the field can take, in declaration order.
    pub fn categories(self) -> Vec<String> {
        fn labels<T: fmt::Display>(all: &[T]) -> Vec<String> {
            all.iter().map(ToString::to_string).collect()
        }
        match self {
            DemographicField::Gender => labels(Gender::ALL),
            DemographicField::Race => labels(Race::ALL),
            DemographicField::AgeGroup => labels(AgeGroup::ALL),
            DemographicField::PoliticalAffiliation => labels(PoliticalAffiliation::ALL),
            DemographicField::Religion => labels(Religion::ALL),
            DemographicField::HouseholdSize => (1..=MAX_HOUSEHOLD_SIZE).map(|n| n.to_string()).collect(),
            DemographicField::Occupation => labels(Occupation::ALL),
            DemographicField::IncomeBracket => labels(IncomeBracket::ALL),
            DemographicField::HousingStatus => labels(HousingStatus::ALL),
            DemographicField::Region => labels(Region::ALL),
            DemographicField::Education => labels(Education::ALL),
            DemographicField::Language => labels(Language::ALL),
            DemographicField::MaritalStatus => labels(MaritalStatus::ALL),
            DemographicField::HealthStatus => labels(HealthStatus::ALL),
            DemographicField::IncomeBucket => labels(IncomeBucket::ALL),
        }
    }
}

impl FromStr for DemographicField {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::STORED
            .iter()
            .copied()
            .chain(std::iter::once(DemographicField::IncomeBucket))
            .find(|f| f.name() == s)
            .ok_or_else(|| DomainError::UnknownField(s.to_string()))
    }
}

impl fmt::Display for DemographicField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Demographics {
    pub fn value_of(&self, field: DemographicField) -> String {
        match field {
            DemographicField::Gender => self.gender.to_string(),
            DemographicField::Race => self.race.to_string(),
            DemographicField::AgeGroup => self.age_group.to_string(),
            DemographicField::PoliticalAffiliation => self.political_affiliation.to_string(),
            DemographicField::Religion => self.religion.to_string(),
            DemographicField::HouseholdSize => self.household_size.get().to_string(),
            DemographicField::Occupation => self.occupation.to_string(),
            DemographicField::IncomeBracket => self.income_bracket.to_string(),
            DemographicField::HousingStatus => self.housing_status.to_string(),
            DemographicField::Region => self.region.to_string(),
            DemographicField::Education => self.education.to_string(),
            DemographicField::Language => self.language.to_string(),
            DemographicField::MaritalStatus => self.marital_status.to_string(),
            DemographicField::HealthStatus => self.health_status.to_string(),
            DemographicField::IncomeBucket => self.income_bracket.bucket().to_string(),
        }
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

string_id!(ProfileId);
string_id!(PolicyId);
string_id!(
    /// Shared by the affirmative and negated phrasing of one policy.
    PairId
);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile")]
pub struct VoterProfile {
    pub id: ProfileId,
    pub demographics: Demographics,
    pub biography: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    id: ProfileId,
    demographics: Demographics,
    biography: String,
}

impl TryFrom<RawProfile> for VoterProfile {
    type Error = DomainError;

    fn try_from(raw: RawProfile) -> Result<Self, Self::Error> {
        if raw.biography.trim().is_empty() {
            return Err(DomainError::EmptyBiography);
        }
        Ok(VoterProfile { id: raw.id, demographics: raw.demographics, biography: raw.biography })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vote {
    Yes,
    No,
}

impl Vote {
    pub fn flipped(self) -> Vote {
        match self {
            Vote::Yes => Vote::No,
            Vote::No => Vote::Yes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Vote::Yes => "Yes",
            Vote::No => "No",
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Affirmative,
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyCategory {
    Contested,
    Consensus,
}

impl PolicyCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyCategory::Contested => "contested",
            PolicyCategory::Consensus => "consensus",
        }
    }
}

impl fmt::Display for PolicyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A policy statement. Cross-policy rules (pairing, polarity) are checked by
/// `corpus::validate_corpus`, not here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub id: PolicyId,
    pub statement: String,
    pub topic: String,
    pub pair_id: PairId,
    pub polarity: Polarity,
    pub category: PolicyCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_stance: Option<Vote>,
    #[serde(default)]
    pub model_defaults: BTreeMap<String, Vote>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Default,
    Delegate,
    TrusteeDual,
    TrusteePeriods,
}

/// What a rendered prompt asks the model to return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    BinaryVote,
    DualSchedule,
    PeriodSchedule,
}

impl Condition {
    pub const ALL: [Condition; 4] =
        [Condition::Default, Condition::Delegate, Condition::TrusteeDual, Condition::TrusteePeriods];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Default => "default",
            Condition::Delegate => "delegate",
            Condition::TrusteeDual => "trustee_dual",
            Condition::TrusteePeriods => "trustee_periods",
        }
    }

    pub fn is_trustee(self) -> bool {
        matches!(self, Condition::TrusteeDual | Condition::TrusteePeriods)
    }

    pub fn expects(self) -> Expectation {
        match self {
            Condition::Default | Condition::Delegate => Expectation::BinaryVote,
            Condition::TrusteeDual => Expectation::DualSchedule,
            Condition::TrusteePeriods => Expectation::PeriodSchedule,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| DomainError::UnknownCategory { kind: "condition", value: s.to_string() })
    }
}

pub const PERIOD_COUNT: usize = 6;

/// Labels of the six five-year periods, index t = 0..5.
pub const PERIOD_LABELS: [&str; PERIOD_COUNT] =
    ["0-5 years", "5-10 years", "10-15 years", "15-20 years", "20-25 years", "25-30 years"];

/// Utility estimates for voting yes and no, on a 0-100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", try_from = "RawSchedule")]
pub enum UtilitySchedule {
    Dual { yes_short: f64, yes_long: f64, no_short: f64, no_long: f64 },
    Periods { yes_periods: [f64; PERIOD_COUNT], no_periods: [f64; PERIOD_COUNT] },
}

#[derive(Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
enum RawSchedule {
    Dual { yes_short: f64, yes_long: f64, no_short: f64, no_long: f64 },
    Periods { yes_periods: [f64; PERIOD_COUNT], no_periods: [f64; PERIOD_COUNT] },
}

impl TryFrom<RawSchedule> for UtilitySchedule {
    type Error = DomainError;

    fn try_from(raw: RawSchedule) -> Result<Self, Self::Error> {
        match raw {
            RawSchedule::Dual { yes_short, yes_long, no_short, no_long } => {
                UtilitySchedule::dual(yes_short, yes_long, no_short, no_long)
            }
            RawSchedule::Periods { yes_periods, no_periods } => UtilitySchedule::periods(yes_periods, no_periods),
        }
    }
}

pub fn check_score(score: f64) -> Result<f64, DomainError> {
    if score.is_finite() && (0.0..=100.0).contains(&score) {
        Ok(score)
    } else {
        Err(DomainError::ScoreOutOfRange(score))
    }
}

impl UtilitySchedule {
    pub fn dual(yes_short: f64, yes_long: f64, no_short: f64, no_long: f64) -> Result<Self, DomainError> {
        Ok(UtilitySchedule::Dual {
            yes_short: check_score(yes_short)?,
            yes_long: check_score(yes_long)?,
            no_short: check_score(no_short)?,
            no_long: check_score(no_long)?,
        })
    }

    pub fn periods(yes_periods: [f64; PERIOD_COUNT], no_periods: [f64; PERIOD_COUNT]) -> Result<Self, DomainError> {
        for &s in yes_periods.iter().chain(no_periods.iter()) {
            check_score(s)?;
        }
        Ok(UtilitySchedule::Periods { yes_periods, no_periods })
    }

    pub fn condition(&self) -> Condition {
        match self {
            UtilitySchedule::Dual { .. } => Condition::TrusteeDual,
            UtilitySchedule::Periods { .. } => Condition::TrusteePeriods,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    ParseFailed,
    ProviderFailed,
}

/// Identity of one experiment cell; the resume and dedup key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub condition: Condition,
    pub variant_id: String,
    pub profile_id: Option<ProfileId>,
    pub policy_id: PolicyId,
}

/// One line of a run's record log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_id: Option<ProfileId>,
    pub policy_id: PolicyId,
    pub model: String,
    pub condition: Condition,
    pub variant_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<Vote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utilities: Option<UtilitySchedule>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamp: DateTime<Utc>,
}

impl VoteRecord {
    pub fn key(&self) -> CellKey {
        CellKey {
            model: self.model.clone(),
            condition: self.condition,
            variant_id: self.variant_id.clone(),
            profile_id: self.profile_id.clone(),
            policy_id: self.policy_id.clone(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }

    pub fn check_invariants(&self) -> Result<(), DomainError> {
        let ok = self.is_ok();
        let votes = matches!(self.condition, Condition::Default | Condition::Delegate);
        if self.vote.is_some() != (ok && votes) {
            return Err(DomainError::Record(format!(
                "vote present = {} with status {:?} and condition {}",
                self.vote.is_some(),
                self.status,
                self.condition
            )));
        }
        if self.utilities.is_some() != (ok && !votes) {
            return Err(DomainError::Record(format!(
                "utilities present = {} with status {:?} and condition {}",
                self.utilities.is_some(),
                self.status,
                self.condition
            )));
        }
        if let Some(u) = &self.utilities {
            if u.condition() != self.condition {
                return Err(DomainError::Record(format!(
                    "{} record carries a {} schedule",
                    self.condition,
                    u.condition()
                )));
            }
        }
        if self.status != RecordStatus::ProviderFailed && self.raw_response.is_none() {
            return Err(DomainError::Record("raw response missing".into()));
        }
        if self.condition == Condition::Default && self.profile_id.is_some() {
            return Err(DomainError::Record("default-condition record names a profile".into()));
        }
        Ok(())
    }
}
