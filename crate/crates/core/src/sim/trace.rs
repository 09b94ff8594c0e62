//! Run records: per-interval rows for detection, pricing, and utility
//! decisions, plus plot-ready series extraction.
//!
//! Row vectors are strictly ordered by (interval, target, observer);
//! writers emit delimited text with fixed column sets, so identical runs
//! produce identical bytes.

use std::io;

use serde::Serialize;

use crate::grid::ProsumerId;
use crate::penalty::{PenaltyRecord, UtilityDecision};

/// CSV emission failure.
#[derive(Debug, thiserror::Error)]
#[error("trace write: {0}")]
pub struct TraceError(#[from] csv::Error);

impl From<io::Error> for TraceError {
    fn from(e: io::Error) -> Self {
        TraceError(csv::Error::from(e))
    }
}

/// One detector update: the filtered mismatch fed in and the recursion
/// terms it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub interval: u64,
    pub observer: ProsumerId,
    pub target: ProsumerId,
    /// Dead-zone-filtered mismatch, MW.
    pub d_mw: f64,
    /// Rate term D.
    pub rate: f64,
    /// Decay factor N.
    pub decay: f64,
    pub f: f64,
}

/// One penalty record plus whether it crossed the vote threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyRow {
    pub record: PenaltyRecord,
    pub vote: bool,
}

/// Delivered versus agreed power for one prosumer in one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub interval: u64,
    pub prosumer: ProsumerId,
    /// Mean probe-measured net power, MW.
    pub actual_mw: f64,
    pub p_ref_mw: f64,
    /// Topology epoch the interval ran under; increments per isolation.
    pub epoch: u32,
}

/// An executed isolation: decided at `interval`, topology and references
/// switch at `effective_from`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationEvent {
    pub interval: u64,
    pub target: ProsumerId,
    pub effective_from: u64,
    pub partition_warning: Option<String>,
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    /// Intervals executed.
    pub horizon: u64,
    /// Non-slack prosumers present at the start; the isolation-signal
    /// series covers exactly these.
    pub watched: Vec<ProsumerId>,
    pub detection: Vec<DetectionRow>,
    pub penalties: Vec<PenaltyRow>,
    pub decisions: Vec<UtilityDecision>,
    pub power: Vec<PowerRow>,
    pub isolations: Vec<IsolationEvent>,
}

impl SimTrace {
    /// Anomaly factor for one (observer, target) pair over the run.
    pub fn factor_series(&self, observer: &ProsumerId, target: &ProsumerId) -> Vec<(u64, f64)> {
        self.detection
            .iter()
            .filter(|r| r.observer == *observer && r.target == *target)
            .map(|r| (r.interval, r.f))
            .collect()
    }

    /// Interval of the first isolation of `target`, if any.
    pub fn isolation_interval(&self, target: &ProsumerId) -> Option<u64> {
        self.isolations
            .iter()
            .find(|e| e.target == *target)
            .map(|e| e.interval)
    }

    /// Writes detector rows: interval, observer, target, d_mw, D, N, F.
    pub fn write_detector_csv(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            observer: &'a ProsumerId,
            target: &'a ProsumerId,
            d_mw: f64,
            #[serde(rename = "D")]
            rate: f64,
            #[serde(rename = "N")]
            decay: f64,
            #[serde(rename = "F")]
            f: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.detection {
            w.serialize(Row {
                interval: r.interval,
                observer: &r.observer,
                target: &r.target,
                d_mw: r.d_mw,
                rate: r.rate,
                decay: r.decay,
                f: r.f,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes penalty rows: interval, observer, target, F, penalty_raw,
    /// penalty, vote.
    pub fn write_penalty_csv(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            observer: &'a ProsumerId,
            target: &'a ProsumerId,
            #[serde(rename = "F")]
            f: f64,
            penalty_raw: f64,
            penalty: f64,
            vote: bool,
        }
        let mut w = csv::Writer::from_writer(out);
        for p in &self.penalties {
            w.serialize(Row {
                interval: p.record.interval,
                observer: &p.record.observer,
                target: &p.record.target,
                f: p.record.f,
                penalty_raw: p.record.raw,
                penalty: p.record.penalty,
                vote: p.vote,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes utility decisions: interval, target, votes, neighbor_count,
    /// ratio, isolated.
    pub fn write_utility_csv(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            target: &'a ProsumerId,
            votes: usize,
            neighbor_count: usize,
            ratio: f64,
            isolated: bool,
        }
        let mut w = csv::Writer::from_writer(out);
        for d in &self.decisions {
            w.serialize(Row {
                interval: d.interval,
                target: &d.target,
                votes: d.votes_received,
                neighbor_count: d.neighbor_count,
                ratio: d.vote_ratio_required,
                isolated: d.isolated,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Series for the delivered-power panel: interval, prosumer,
    /// actual_mw, p_ref_mw, epoch. Rows exist only while the prosumer is
    /// connected.
    pub fn write_power_series(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            prosumer: &'a ProsumerId,
            actual_mw: f64,
            p_ref_mw: f64,
            epoch: u32,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.power {
            w.serialize(Row {
                interval: r.interval,
                prosumer: &r.prosumer,
                actual_mw: r.actual_mw,
                p_ref_mw: r.p_ref_mw,
                epoch: r.epoch,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Series for the anomaly-factor panel: interval, target, F — the
    /// largest factor any observer holds against the target.
    pub fn write_factor_series(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            target: &'a ProsumerId,
            #[serde(rename = "F")]
            f: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        let mut current: Option<(u64, &ProsumerId, f64)> = None;
        for r in &self.detection {
            match current {
                Some((interval, target, f)) if interval == r.interval && *target == r.target => {
                    current = Some((interval, target, f.max(r.f)));
                }
                Some((interval, target, f)) => {
                    w.serialize(Row { interval, target, f })?;
                    current = Some((r.interval, &r.target, r.f));
                }
                None => current = Some((r.interval, &r.target, r.f)),
            }
        }
        if let Some((interval, target, f)) = current {
            w.serialize(Row { interval, target, f })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Series for the penalty panel: interval, target, mean penalty over
    /// the observers that reported.
    pub fn write_penalty_series(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            target: &'a ProsumerId,
            mean_penalty: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        let mut group: Option<(u64, &ProsumerId, f64, usize)> = None;
        for p in &self.penalties {
            let r = &p.record;
            match group {
                Some((interval, target, sum, n))
                    if interval == r.interval && *target == r.target =>
                {
                    group = Some((interval, target, sum + r.penalty, n + 1));
                }
                Some((interval, target, sum, n)) => {
                    w.serialize(Row {
                        interval,
                        target,
                        mean_penalty: sum / n as f64,
                    })?;
                    group = Some((r.interval, &r.target, r.penalty, 1));
                }
                None => group = Some((r.interval, &r.target, r.penalty, 1)),
            }
        }
        if let Some((interval, target, sum, n)) = group {
            w.serialize(Row {
                interval,
                target,
                mean_penalty: sum / n as f64,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Series for the isolation-signal panel: interval, target, signal —
    /// 0 until the isolation decision, 1 from it on (latched), for every
    /// initially watched prosumer over the whole horizon.
    pub fn write_isolation_series(&self, out: impl io::Write) -> Result<(), TraceError> {
        #[derive(Serialize)]
        struct Row<'a> {
            interval: u64,
            target: &'a ProsumerId,
            signal: u8,
        }
        let mut w = csv::Writer::from_writer(out);
        for interval in 1..=self.horizon {
            for target in &self.watched {
                let fired = self
                    .isolation_interval(target)
                    .is_some_and(|at| interval >= at);
                w.serialize(Row {
                    interval,
                    target,
                    signal: fired as u8,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
