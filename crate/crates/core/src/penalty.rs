//! Exponential penalty pricing of anomaly factors, threshold votes, and
//! the utility's vote-ratio isolation decision.
//!
//! Each observer prices the anomaly factor it maintains for a target as
//! `c^F - 1` with base `c > 1`: exactly zero in normal operation,
//! exponentially growing under a sustained anomaly, shrinking back toward
//! zero as the factor decays. A price strictly above the threshold is an
//! isolation vote; once distinct voters exceed the configured fraction of
//! the target's neighbors, the utility isolates it. Executing that
//! decision removes the node, re-references the reduced network, and
//! rebuilds the detector bank.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detection::DetectorState;
use crate::dopf::{DopfError, ReferenceProvider, ReferenceSchedule};
use crate::grid::{GridError, Network, ProsumerId};

/// Pricing and isolation tuning: exponential base `c`, the price above
/// which an observer votes, and the neighbor fraction that must vote
/// before the utility isolates. Currency units are abstract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub c: f64,
    pub c_th: f64,
    pub vote_ratio: f64,
}

/// Validation and tallying failures.
#[derive(Debug, thiserror::Error)]
pub enum PenaltyError {
    #[error("penalty base c must be finite and > 1, got {0}")]
    BadBase(f64),
    #[error("isolation threshold must be finite and > 0, got {0}")]
    BadThreshold(f64),
    #[error("vote ratio must lie strictly between 0 and 1, got {0}")]
    BadVoteRatio(f64),
    #[error("no penalty records for target `{0}` at interval {1}")]
    NoRecords(ProsumerId, u64),
    #[error("vote from `{observer}` against `{target}`: not a neighbor")]
    NonNeighborVote {
        observer: ProsumerId,
        target: ProsumerId,
    },
    #[error("vote against `{vote_target}` at interval {vote_interval} mixed into the tally for `{target}` at interval {interval}")]
    MisdirectedVote {
        vote_target: ProsumerId,
        vote_interval: u64,
        target: ProsumerId,
        interval: u64,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    References(#[from] DopfError),
}

impl PenaltyParams {
    pub fn new(c: f64, c_th: f64, vote_ratio: f64) -> Result<Self, PenaltyError> {
        if !(c.is_finite() && c > 1.0) {
            return Err(PenaltyError::BadBase(c));
        }
        if !(c_th.is_finite() && c_th > 0.0) {
            return Err(PenaltyError::BadThreshold(c_th));
        }
        if !(vote_ratio > 0.0 && vote_ratio < 1.0) {
            return Err(PenaltyError::BadVoteRatio(vote_ratio));
        }
        Ok(PenaltyParams {
            c,
            c_th,
            vote_ratio,
        })
    }
}

/// Price of one anomaly factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyPrice {
    /// Unfloored `c^F - 1`; negative when F < 0.
    pub raw: f64,
    /// Floored, saturation-clamped price. Always finite and ≥ 0.
    pub value: f64,
    /// Set when `c^F` overflowed and the price clamped at `f64::MAX`.
    pub saturated: bool,
}

/// Prices a factor as `max(0, c^F - 1)`. The floor keeps a transiently
/// negative factor from paying the target; the raw value is retained so
/// traces can still show it. Overflow clamps to `f64::MAX` with a flag.
pub fn neighbor_penalty(f: f64, c: f64) -> PenaltyPrice {
    debug_assert!(f.is_finite() && c.is_finite() && c > 1.0);
    let raw = c.powf(f) - 1.0;
    if raw > f64::MAX {
        PenaltyPrice {
            raw: f64::MAX,
            value: f64::MAX,
            saturated: true,
        }
    } else {
        PenaltyPrice {
            raw,
            value: raw.max(0.0),
            saturated: false,
        }
    }
}

/// One interval's price from an observer against a target, in trace
/// column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRecord {
    pub observer: ProsumerId,
    pub target: ProsumerId,
    pub interval: u64,
    /// Anomaly factor the price was computed from.
    pub f: f64,
    /// Unfloored price; see [`PenaltyPrice::raw`].
    pub raw: f64,
    /// Floored price actually charged.
    pub penalty: f64,
    pub saturated: bool,
}

impl PenaltyRecord {
    pub fn price(
        observer: ProsumerId,
        target: ProsumerId,
        interval: u64,
        f: f64,
        params: &PenaltyParams,
    ) -> Self {
        let p = neighbor_penalty(f, params.c);
        PenaltyRecord {
            observer,
            target,
            interval,
            f,
            raw: p.raw,
            penalty: p.value,
            saturated: p.saturated,
        }
    }
}

/// Mean neighbor price against one target for one interval; the price
/// the operator reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPenalty {
    pub target: ProsumerId,
    pub interval: u64,
    pub value: f64,
    /// Observers that contributed.
    pub observers: usize,
}

/// Arithmetic mean of the records matching `target` and `interval`.
/// Observers without a record (skipped windows) drop out of both the
/// numerator and the denominator; no matching record at all is an error.
pub fn aggregate_penalty(
    records: &[PenaltyRecord],
    target: &ProsumerId,
    interval: u64,
) -> Result<AggregatedPenalty, PenaltyError> {
    let matching: Vec<&PenaltyRecord> = records
        .iter()
        .filter(|r| r.target == *target && r.interval == interval)
        .collect();
    if matching.is_empty() {
        return Err(PenaltyError::NoRecords(target.clone(), interval));
    }
    let sum: f64 = matching.iter().map(|r| r.penalty).sum();
    Ok(AggregatedPenalty {
        target: target.clone(),
        interval,
        value: sum / matching.len() as f64,
        observers: matching.len(),
    })
}

/// An observer's report to the utility that its price against the target
/// crossed the threshold.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IsolationVote {
    pub observer: ProsumerId,
    pub target: ProsumerId,
    pub interval: u64,
}

/// A price strictly above the threshold votes; the boundary itself is
/// still normal operation.
pub fn check_threshold(record: &PenaltyRecord, c_th: f64) -> Option<IsolationVote> {
    debug_assert!(c_th > 0.0);
    if record.penalty > c_th {
        Some(IsolationVote {
            observer: record.observer.clone(),
            target: record.target.clone(),
            interval: record.interval,
        })
    } else {
        None
    }
}

/// The utility's per-interval verdict on one target, with the counts
/// that justify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityDecision {
    pub target: ProsumerId,
    pub interval: u64,
    pub isolated: bool,
    /// Distinct voters.
    pub votes_received: usize,
    /// Neighbor count the ratio was taken over.
    pub neighbor_count: usize,
    pub vote_ratio_required: f64,
}

/// Tallies votes against one target and decides isolation: distinct
/// voters must exceed `ratio` of the target's neighbors (strict).
/// Duplicate votes from one observer count once. A vote from a
/// non-neighbor, or one aimed at a different target or interval, is
/// rejected rather than skipped — the utility tallies single-writer at
/// interval end, so mixed input means a harness bug.
pub fn utility_decide(
    votes: &[IsolationVote],
    net: &Network,
    target: &ProsumerId,
    interval: u64,
    ratio: f64,
) -> Result<UtilityDecision, PenaltyError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PenaltyError::BadVoteRatio(ratio));
    }
    let neighbors = net.neighbors(target)?;
    let mut voters = BTreeSet::new();
    for v in votes {
        if v.target != *target || v.interval != interval {
            return Err(PenaltyError::MisdirectedVote {
                vote_target: v.target.clone(),
                vote_interval: v.interval,
                target: target.clone(),
                interval,
            });
        }
        if !neighbors.contains(&v.observer) {
            return Err(PenaltyError::NonNeighborVote {
                observer: v.observer.clone(),
                target: target.clone(),
            });
        }
        voters.insert(v.observer.clone());
    }
    let votes_received = voters.len();
    let neighbor_count = neighbors.len();
    let isolated =
        neighbor_count > 0 && votes_received as f64 > ratio * neighbor_count as f64;
    Ok(UtilityDecision {
        target: target.clone(),
        interval,
        isolated,
        votes_received,
        neighbor_count,
        vote_ratio_required: ratio,
    })
}

/// Detector bank: one state per (observer, target) pair.
pub type DetectorBank = BTreeMap<(ProsumerId, ProsumerId), DetectorState>;

/// Result of executing an isolation: the reduced network, the schedule
/// governing it from the next interval on, and the connectivity warning
/// if the removal split the graph.
#[derive(Debug, Clone)]
pub struct MitigationOutcome {
    pub network: Network,
    pub schedule: ReferenceSchedule,
    pub partition_warning: Option<String>,
}

/// Executes an isolation decision: removes the target from the network,
/// asks the provider for references over what remains (valid from the
/// next interval), drops every detector the target owned or was watched
/// by, and resets the rest — mismatch history predates the topology
/// change and would poison the new baseline. A non-isolating decision is
/// a no-op returning `None`.
pub fn apply_mitigation(
    decision: &UtilityDecision,
    net: &Network,
    provider: &dyn ReferenceProvider,
    detectors: &mut DetectorBank,
) -> Result<Option<MitigationOutcome>, PenaltyError> {
    if !decision.isolated {
        return Ok(None);
    }
    let outcome = net.isolate(&decision.target)?;
    let schedule = provider.references(&outcome.network, decision.interval + 1)?;
    detectors
        .retain(|(observer, target), _| *observer != decision.target && *target != decision.target);
    for state in detectors.values_mut() {
        state.reset();
    }
    Ok(Some(MitigationOutcome {
        network: outcome.network,
        schedule,
        partition_warning: outcome.partition_warning,
    }))
}
