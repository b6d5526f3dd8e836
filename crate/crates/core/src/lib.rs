//! Delegate and trustee vote simulation with language-model voters.
//!
//! `domain` holds the shared types, `corpus` and `prompts` the inputs,
//! `providers` the model backends, `runner` the experiment loop,
//! `aggregation` the trustee decision rule, and `analytics` plus `report`
//! turn a record log into tables and charts.

pub mod aggregation;
pub mod analytics;
pub mod corpus;
pub mod domain;
pub mod prompts;
pub mod providers;
pub mod report;
pub mod runner;

pub use aggregation::{trustee_vote, Emphasis, TrusteeMethod};
pub use analytics::{AgreementReport, AlphaCurve, Arm, Ballot, Reference, StanceMap};
pub use domain::{
    CellKey, Condition, DemographicField, Demographics, PairId, Polarity, Policy, PolicyCategory, PolicyId, ProfileId,
    RecordStatus, UtilitySchedule, Vote, VoteRecord, VoterProfile,
};
pub use providers::{Provider, ProviderHandle};
pub use runner::{RunManifest, RunPlan};
