//! Turning trustee utility schedules into votes.
//!
//! Both temporal models are driven by one long-term emphasis parameter
//! `lambda` in [0, 1]:
//!
//! * exponential discounting over six five-year periods uses `lambda` as the
//!   per-period discount factor, `U = sum_t lambda^t * u_t` with `lambda^0 = 1`;
//! * the short/long model weights the long-term score by `lambda` and the
//!   short-term score by `1 - lambda`.
//!
//! So `lambda = 1` is the most long-term-weighted setting in both. For the
//! short/long model, a weight `alpha` placed on the short-term score
//! corresponds to `lambda = 1 - alpha`.
//!
//! A vote is Yes only when the yes-utility is strictly greater; ties vote No.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{check_score, UtilitySchedule, Vote, PERIOD_COUNT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("emphasis {0} outside [0, 1]")]
    Emphasis(f64),
    #[error("expected {PERIOD_COUNT} period scores, got {0}")]
    PeriodCount(usize),
    #[error("score {0} outside [0, 100]")]
    Score(f64),
    #[error("utility is not finite")]
    NonFinite,
    #[error("lambda grid is empty")]
    EmptyGrid,
    #[error("lambda grid must be strictly increasing (at {0})")]
    GridOrder(f64),
    #[error("bad grid spec `{0}`; expected start:end:step")]
    GridSpec(String),
}

/// Long-term emphasis in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Emphasis(f64);

impl Emphasis {
    pub fn new(lambda: f64) -> Result<Self, AggregationError> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Emphasis(lambda))
        } else {
            Err(AggregationError::Emphasis(lambda))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// The weight the short/long model puts on the short-term score.
    pub fn short_weight(self) -> f64 {
        1.0 - self.0
    }
}

impl TryFrom<f64> for Emphasis {
    type Error = AggregationError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Emphasis::new(v)
    }
}

impl From<Emphasis> for f64 {
    fn from(e: Emphasis) -> f64 {
        e.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrusteeMethod {
    Exponential,
    Dual,
}

impl TrusteeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TrusteeMethod::Exponential => "exponential",
            TrusteeMethod::Dual => "dual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedUtility {
    pub u_yes: f64,
    pub u_no: f64,
    pub method: TrusteeMethod,
    pub lambda: f64,
}

fn score(s: f64) -> Result<f64, AggregationError> {
    check_score(s).map_err(|_| AggregationError::Score(s))
}

/// `sum_{t=0..5} lambda^t * periods[t]`.
pub fn discount_exponential(periods: &[f64], lambda: f64) -> Result<f64, AggregationError> {
    if periods.len() != PERIOD_COUNT {
        return Err(AggregationError::PeriodCount(periods.len()));
    }
    let lambda = Emphasis::new(lambda)?.get();
    let mut weight = 1.0;
    let mut total = 0.0;
    for &s in periods {
        total += weight * score(s)?;
        weight *= lambda;
    }
    Ok(total)
}

/// `(1 - lambda) * short + lambda * long`.
pub fn aggregate_dual(short: f64, long: f64, lambda: f64) -> Result<f64, AggregationError> {
    let e = Emphasis::new(lambda)?;
    Ok(e.short_weight() * score(short)? + e.get() * score(long)?)
}

pub fn decide(u_yes: f64, u_no: f64) -> Result<Vote, AggregationError> {
    if !u_yes.is_finite() || !u_no.is_finite() {
        return Err(AggregationError::NonFinite);
    }
    Ok(if u_yes > u_no { Vote::Yes } else { Vote::No })
}

pub fn method_of(schedule: &UtilitySchedule) -> TrusteeMethod {
    match schedule {
        UtilitySchedule::Dual { .. } => TrusteeMethod::Dual,
        UtilitySchedule::Periods { .. } => TrusteeMethod::Exponential,
    }
}

pub fn trustee_vote(schedule: &UtilitySchedule, lambda: f64) -> Result<(Vote, AggregatedUtility), AggregationError> {
    let (u_yes, u_no) = match schedule {
        UtilitySchedule::Periods { yes_periods, no_periods } => {
            (discount_exponential(yes_periods, lambda)?, discount_exponential(no_periods, lambda)?)
        }
        UtilitySchedule::Dual { yes_short, yes_long, no_short, no_long } => {
            (aggregate_dual(*yes_short, *yes_long, lambda)?, aggregate_dual(*no_short, *no_long, lambda)?)
        }
    };
    let vote = decide(u_yes, u_no)?;
    Ok((vote, AggregatedUtility { u_yes, u_no, method: method_of(schedule), lambda }))
}

pub fn check_grid(grid: &[f64]) -> Result<(), AggregationError> {
    if grid.is_empty() {
        return Err(AggregationError::EmptyGrid);
    }
    for &l in grid {
        Emphasis::new(l)?;
    }
    for w in grid.windows(2) {
        if w[1] <= w[0] {
            return Err(AggregationError::GridOrder(w[1]));
        }
    }
    Ok(())
}

pub fn sweep(schedule: &UtilitySchedule, grid: &[f64]) -> Result<Vec<(f64, Vote)>, AggregationError> {
    check_grid(grid)?;
    grid.iter().map(|&l| trustee_vote(schedule, l).map(|(v, _)| (l, v))).collect()
}

/// 0.0, 0.1, ..., 1.0.
pub fn default_grid() -> Vec<f64> {
    linear_grid(0.0, 1.0, 10)
}

fn linear_grid(start: f64, end: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| if i == steps { end } else { start + (end - start) * i as f64 / steps as f64 }).collect()
}

/// Parses `start:end:step`, e.g. `0:1:0.1`. Points are computed by division
/// so `0:1:0.1` yields exactly the decimal values 0.0, 0.1, ... 1.0.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, AggregationError> {
    let bad = || AggregationError::GridSpec(spec.to_string());
    let parts: Vec<f64> =
        spec.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let grid = match parts.as_slice() {
        [single] => vec![*single],
        [start, end, step] if *step > 0.0 && end >= start => {
            let steps = ((end - start) / step).round();
            if !steps.is_finite() || steps > 100_000.0 || ((end - start) - steps * step).abs() > 1e-9 * step.max(1.0) {
                return Err(bad());
            }
            linear_grid(*start, *end, steps as usize)
        }
        _ => return Err(bad()),
    };
    check_grid(&grid)?;
    Ok(grid)
}
