//! Neighbor probing: per-interval energy mismatch from tie-line samples.
//!
//! During interval `z` every line endpoint is sampled `L` times; the
//! samples travel over an interval-barrier message bus. An observer
//! adjacent to a target gathers the target's complete window — all of its
//! tie-line flows, reachable within two hops — and compares the measured
//! energy against the agreed reference:
//!
//! ```text
//! raw_energy = (tau/L) * sum_{k in N_i} sum_{l=1..L} p_ik(l) - tau * p_ref_i
//! d          = raw_energy / tau
//! ```
//!
//! `d` is the average-power mismatch in MW (positive = over-production),
//! which keeps the dead-zone width in the same unit as the references;
//! the energy value is retained for reporting. A dead-zone filter zeroes
//! sub-threshold mismatch before it reaches the detectors.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::dopf::ReferenceSchedule;
use crate::grid::{GridError, Network, ProsumerId};

/// Probing cadence: interval length `tau` in minutes and samples per
/// line per interval. The defaults give 10-second sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub tau_min: f64,
    pub samples_per_interval: u32,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            tau_min: 5.0,
            samples_per_interval: 30,
        }
    }
}

/// Probing failures.
#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("interval length tau must be finite and > 0 minutes, got {0}")]
    BadTau(f64),
    #[error("samples per interval must be >= 1, got {0}")]
    BadSampleCount(u32),
    #[error("sample index 0 on line `{from}`->`{to}`: probe indices are 1-based")]
    ZeroSampleIndex { from: ProsumerId, to: ProsumerId },
    #[error("non-finite probe power {power} on line `{from}`->`{to}`")]
    BadPower {
        from: ProsumerId,
        to: ProsumerId,
        power: f64,
    },
    #[error("observer `{observer}` does not adjoin target `{target}`")]
    NotAdjacent {
        observer: ProsumerId,
        target: ProsumerId,
    },
    #[error("`{beyond}` lies outside `{observer}`'s two-hop reach")]
    OutOfReach {
        observer: ProsumerId,
        beyond: ProsumerId,
    },
    #[error("window (`{observer}` watching `{target}`, interval {interval}): line to `{to}` has {have} of {want} samples")]
    IncompleteWindow {
        observer: ProsumerId,
        target: ProsumerId,
        interval: u64,
        to: ProsumerId,
        have: usize,
        want: usize,
    },
    #[error("no reference value for prosumer `{0}`")]
    NoReference(ProsumerId),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("probe trace: {0}")]
    Trace(#[from] csv::Error),
}

impl ProbeParams {
    pub fn new(tau_min: f64, samples_per_interval: u32) -> Result<Self, ProbeError> {
        if !(tau_min.is_finite() && tau_min > 0.0) {
            return Err(ProbeError::BadTau(tau_min));
        }
        if samples_per_interval == 0 {
            return Err(ProbeError::BadSampleCount(samples_per_interval));
        }
        Ok(ProbeParams {
            tau_min,
            samples_per_interval,
        })
    }
}

/// One line-flow measurement: power at `from`'s end of the line toward
/// `to`, positive when exporting from `from`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub from: ProsumerId,
    pub to: ProsumerId,
    /// 1-based position within the interval, in `1..=L`.
    pub sample_index: u32,
    pub power_mw: f64,
}

/// Interval-barrier message bus carrying probe samples. All samples for
/// an interval are published before any window for that interval is
/// collected; storage order (not arrival order) drives iteration, so
/// delivery is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ProbeBus {
    /// (interval, from, to) -> sample_index -> MW. Re-publishing an
    /// index overwrites: last write wins.
    messages: BTreeMap<(u64, ProsumerId, ProsumerId), BTreeMap<u32, f64>>,
}

impl ProbeBus {
    pub fn new() -> Self {
        ProbeBus::default()
    }

    pub fn publish(&mut self, interval: u64, sample: ProbeSample) -> Result<(), ProbeError> {
        if sample.sample_index == 0 {
            return Err(ProbeError::ZeroSampleIndex {
                from: sample.from,
                to: sample.to,
            });
        }
        if !sample.power_mw.is_finite() {
            return Err(ProbeError::BadPower {
                from: sample.from,
                to: sample.to,
                power: sample.power_mw,
            });
        }
        self.messages
            .entry((interval, sample.from, sample.to))
            .or_default()
            .insert(sample.sample_index, sample.power_mw);
        Ok(())
    }

    /// Samples published for one directed line in one interval, keyed by
    /// sample index.
    pub fn line(&self, interval: u64, from: &ProsumerId, to: &ProsumerId) -> Option<&BTreeMap<u32, f64>> {
        self.messages
            .get(&(interval, from.clone(), to.clone()))
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Writes every stored sample as delimited text with columns
    /// (interval, from, to, sample_index, power_mw), ordered by key.
    pub fn write_trace(&self, out: impl io::Write) -> Result<(), ProbeError> {
        let mut w = csv::Writer::from_writer(out);
        for ((interval, from, to), line) in &self.messages {
            for (&sample_index, &power_mw) in line {
                w.serialize(TraceRow {
                    interval: *interval,
                    from: from.clone(),
                    to: to.clone(),
                    sample_index,
                    power_mw,
                })?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Rebuilds a bus from trace text produced by [`Self::write_trace`]
    /// (or recorded elsewhere in the same column layout).
    pub fn read_trace(input: impl io::Read) -> Result<Self, ProbeError> {
        let mut bus = ProbeBus::new();
        let mut r = csv::Reader::from_reader(input);
        for row in r.deserialize() {
            let row: TraceRow = row?;
            bus.publish(
                row.interval,
                ProbeSample {
                    from: row.from,
                    to: row.to,
                    sample_index: row.sample_index,
                    power_mw: row.power_mw,
                },
            )?;
        }
        Ok(bus)
    }
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    interval: u64,
    from: ProsumerId,
    to: ProsumerId,
    sample_index: u32,
    power_mw: f64,
}

/// A target's complete probe record for one interval: `L` samples for
/// every tie line, as assembled by one observer.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    pub observer: ProsumerId,
    pub target: ProsumerId,
    pub interval: u64,
    /// Neighbor -> the target-end flows toward that neighbor, in sample
    /// order. Every entry holds exactly `L` values.
    pub samples: BTreeMap<ProsumerId, Vec<f64>>,
}

/// Assembles the target's window from the bus. The observer must adjoin
/// the target, and every line endpoint must sit within the observer's
/// two-hop reach (it always does on a connected graph — the check guards
/// against malformed topologies). Any line short of `L` samples makes
/// the window incomplete; callers skip detection for that interval
/// rather than score a partial window.
pub fn collect_window(
    bus: &ProbeBus,
    net: &Network,
    observer: &ProsumerId,
    target: &ProsumerId,
    interval: u64,
    params: &ProbeParams,
) -> Result<MeasurementWindow, ProbeError> {
    if !net.neighbors(observer)?.contains(target) {
        return Err(ProbeError::NotAdjacent {
            observer: observer.clone(),
            target: target.clone(),
        });
    }
    let watched = net.neighbors(target)?;
    let reach = net.two_hop(observer)?;
    let want = params.samples_per_interval;
    let mut samples = BTreeMap::new();
    for k in &watched {
        if k != observer && !reach.contains(k) {
            return Err(ProbeError::OutOfReach {
                observer: observer.clone(),
                beyond: k.clone(),
            });
        }
        let line = bus.line(interval, target, k);
        let have = line.map_or(0, |m| m.len());
        let complete = have as u32 == want && line.is_some_and(|m| m.keys().all(|&i| i <= want));
        if !complete {
            return Err(ProbeError::IncompleteWindow {
                observer: observer.clone(),
                target: target.clone(),
                interval,
                to: k.clone(),
                have,
                want: want as usize,
            });
        }
        samples.insert(k.clone(), line.unwrap().values().copied().collect());
    }
    Ok(MeasurementWindow {
        observer: observer.clone(),
        target: target.clone(),
        interval,
        samples,
    })
}

/// One observer's verdict on one target over one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub observer: ProsumerId,
    pub target: ProsumerId,
    pub interval: u64,
    /// Average-power mismatch, MW; positive = over-production. Always
    /// exactly `raw_energy / tau`.
    pub d: f64,
    /// Energy mismatch over the interval, MW*min.
    pub raw_energy: f64,
}

/// Compares a window against the agreed reference. The sum runs
/// per-sample over the deviation, so a profile that matches the
/// reference at every instant yields `d = 0` exactly — not merely small.
pub fn energy_mismatch(
    w: &MeasurementWindow,
    refs: &ReferenceSchedule,
    params: &ProbeParams,
) -> Result<MismatchReport, ProbeError> {
    let p_ref = refs
        .p_ref(&w.target)
        .ok_or_else(|| ProbeError::NoReference(w.target.clone()))?;
    let l = params.samples_per_interval as usize;
    for (to, line) in &w.samples {
        if line.len() != l {
            return Err(ProbeError::IncompleteWindow {
                observer: w.observer.clone(),
                target: w.target.clone(),
                interval: w.interval,
                to: to.clone(),
                have: line.len(),
                want: l,
            });
        }
    }
    let mut total_deviation = 0.0;
    for idx in 0..l {
        let mut injected = 0.0;
        for line in w.samples.values() {
            injected += line[idx];
        }
        total_deviation += injected - p_ref;
    }
    let raw_energy = params.tau_min * total_deviation / l as f64;
    let d = raw_energy / params.tau_min;
    Ok(MismatchReport {
        observer: w.observer.clone(),
        target: w.target.clone(),
        interval: w.interval,
        d,
        raw_energy,
    })
}

/// Zeroes sub-threshold mismatch. The boundary counts as inside the
/// zone, matching the decay branch of the detector.
pub fn dead_zone(d: f64, eps_dz: f64) -> f64 {
    debug_assert!(eps_dz > 0.0);
    if d.abs() <= eps_dz {
        0.0
    } else {
        d
    }
}
