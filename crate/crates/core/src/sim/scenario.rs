//! Scenario files: the declarative description of one simulation run.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! [sim]
//! K = 24          # intervals
//! tau_min = 5.0   # interval length, minutes
//! L = 30          # probe samples per interval (default 30)
//! seed = 42       # recorded for reproducibility bookkeeping
//!
//! [detector]
//! n0 = 3.0
//! a = 1.0
//! eps_dz_mw = 0.1
//!
//! [penalty]
//! c = 1.06
//! c_th = 1300.0
//! vote_ratio = 0.5   # default 0.5
//!
//! [reference]
//! mode = "fixed"     # or "solve"
//! [reference.values]
//! pi1 = { p_mw = 23.56 }
//! [reference.post_isolation_values]
//! pi1 = { p_mw = 83.01 }
//!
//! [[injections]]
//! target = "pi2"
//! start_k = 4
//! end_k = 5          # exclusive; omit for open-ended
//! mode = "scale"     # or "offset_mw"
//! magnitude = 1.15
//! ```
//!
//! In `fixed` mode the `values` table must cover every prosumer of the
//! network the scenario runs against; `post_isolation_values`, when
//! given, replaces it after the first topology change. In `solve` mode
//! references come from the dispatch solver and neither table is
//! allowed. Unknown fields are rejected.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::detection::{DetectionError, DetectorParams};
use crate::dopf::{fixed_reference, DopfError, PowerRef};
use crate::grid::{GridError, Network, ProsumerId};
use crate::penalty::{PenaltyError, PenaltyParams};
use crate::probing::{ProbeError, ProbeParams};

/// Scenario validation failures.
#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario file does not match the schema: {0}")]
    Schema(String),
    #[error("sim.K must be >= 1")]
    BadHorizon,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Detector(#[from] DetectionError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error("injections[{index}]: window start_k {start} does not precede end_k {end}")]
    EmptyInjectionWindow { index: usize, start: u64, end: u64 },
    #[error("injections[{index}]: magnitude must be finite, got {value}")]
    BadMagnitude { index: usize, value: f64 },
    #[error("injections[{index}]: unknown prosumer `{target}`")]
    UnknownInjectionTarget { index: usize, target: ProsumerId },
    #[error("injections[{index}]: `{target}` is the slack bus; it closes the power balance and cannot carry an injection")]
    SlackInjection { index: usize, target: ProsumerId },
    #[error("reference.values is required when reference.mode = \"fixed\"")]
    MissingFixedValues,
    #[error("reference value tables are not allowed when reference.mode = \"solve\"")]
    UnexpectedFixedValues,
    #[error(transparent)]
    References(#[from] DopfError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    sim: SimSection,
    detector: DetectorSection,
    penalty: PenaltySection,
    reference: ReferenceSection,
    #[serde(default)]
    injections: Vec<InjectionEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    #[serde(rename = "K")]
    k: u64,
    tau_min: f64,
    #[serde(rename = "L", default = "default_samples")]
    l: u32,
    #[serde(default)]
    seed: u64,
}

fn default_samples() -> u32 {
    30
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorSection {
    n0: f64,
    a: f64,
    eps_dz_mw: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PenaltySection {
    c: f64,
    c_th: f64,
    #[serde(default = "default_vote_ratio")]
    vote_ratio: f64,
}

fn default_vote_ratio() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceSection {
    mode: Mode,
    values: Option<BTreeMap<String, RefEntry>>,
    post_isolation_values: Option<BTreeMap<String, RefEntry>>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Fixed,
    Solve,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefEntry {
    p_mw: f64,
    #[serde(default)]
    q_mvar: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectionEntry {
    target: String,
    start_k: u64,
    end_k: Option<u64>,
    mode: InjectionMode,
    magnitude: f64,
}

/// How an injection distorts the target's actual production.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Actual = magnitude * p_ref. "15% over" is magnitude 1.15.
    Scale,
    /// Actual = p_ref + magnitude (MW).
    OffsetMw,
}

/// One deviation of actual production from the agreed reference,
/// active for intervals `start_k <= k < end_k` (open-ended when `end_k`
/// is absent). References themselves are never altered — the injection
/// is precisely the anomaly the detectors should see.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyInjection {
    pub target: ProsumerId,
    pub start_k: u64,
    pub end_k: Option<u64>,
    pub mode: InjectionMode,
    pub magnitude: f64,
}

impl AnomalyInjection {
    pub fn active_at(&self, k: u64) -> bool {
        k >= self.start_k && self.end_k.is_none_or(|end| k < end)
    }

    pub fn apply(&self, p_ref: f64) -> f64 {
        match self.mode {
            InjectionMode::Scale => self.magnitude * p_ref,
            InjectionMode::OffsetMw => p_ref + self.magnitude,
        }
    }
}

/// Where reference schedules come from during the run.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceMode {
    /// Replayed fixed values; the optional second table takes over after
    /// the first topology change.
    Fixed {
        values: BTreeMap<ProsumerId, PowerRef>,
        post_isolation: Option<BTreeMap<ProsumerId, PowerRef>>,
    },
    /// Run the dispatch solver, initially and after every topology
    /// change.
    Solve,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Number of intervals; the run executes k = 1..=horizon.
    pub horizon: u64,
    /// Recorded in reports so a run can be tied to its inputs. The
    /// synthesized world is noise-free, so the seed drives nothing.
    pub seed: u64,
    pub probe: ProbeParams,
    pub detector: DetectorParams,
    pub penalty: PenaltyParams,
    pub reference: ReferenceMode,
    /// Applied in list order when several overlap on one target.
    pub injections: Vec<AnomalyInjection>,
}

impl Scenario {
    /// Parses and validates scenario text. Checks everything that does
    /// not require the network; see [`Scenario::validate_against`] for
    /// the rest.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Schema(e.to_string()))?;
        if file.sim.k == 0 {
            return Err(ScenarioError::BadHorizon);
        }
        let probe = ProbeParams::new(file.sim.tau_min, file.sim.l)?;
        let detector = DetectorParams::new(
            file.detector.n0,
            file.detector.a,
            file.detector.eps_dz_mw,
        )?;
        let penalty = PenaltyParams::new(
            file.penalty.c,
            file.penalty.c_th,
            file.penalty.vote_ratio,
        )?;
        let reference = match file.reference.mode {
            Mode::Fixed => {
                let values = file
                    .reference
                    .values
                    .ok_or(ScenarioError::MissingFixedValues)?;
                ReferenceMode::Fixed {
                    values: convert_refs(values),
                    post_isolation: file.reference.post_isolation_values.map(convert_refs),
                }
            }
            Mode::Solve => {
                if file.reference.values.is_some()
                    || file.reference.post_isolation_values.is_some()
                {
                    return Err(ScenarioError::UnexpectedFixedValues);
                }
                ReferenceMode::Solve
            }
        };
        let mut injections = Vec::with_capacity(file.injections.len());
        for (index, e) in file.injections.into_iter().enumerate() {
            if let Some(end) = e.end_k {
                if e.start_k >= end {
                    return Err(ScenarioError::EmptyInjectionWindow {
                        index,
                        start: e.start_k,
                        end,
                    });
                }
            }
            if !e.magnitude.is_finite() {
                return Err(ScenarioError::BadMagnitude {
                    index,
                    value: e.magnitude,
                });
            }
            injections.push(AnomalyInjection {
                target: ProsumerId::new(e.target),
                start_k: e.start_k,
                end_k: e.end_k,
                mode: e.mode,
                magnitude: e.magnitude,
            });
        }
        Ok(Scenario {
            horizon: file.sim.k,
            seed: file.sim.seed,
            probe,
            detector,
            penalty,
            reference,
            injections,
        })
    }

    /// Network-dependent checks: injection targets must exist and must
    /// not be the slack (its power is whatever closes the balance, so an
    /// injection there could never manifest), and fixed references must
    /// cover every prosumer.
    pub fn validate_against(&self, net: &Network) -> Result<(), ScenarioError> {
        for (index, inj) in self.injections.iter().enumerate() {
            let p = net.prosumer(&inj.target).map_err(|_| {
                ScenarioError::UnknownInjectionTarget {
                    index,
                    target: inj.target.clone(),
                }
            })?;
            if p.is_slack {
                return Err(ScenarioError::SlackInjection {
                    index,
                    target: inj.target.clone(),
                });
            }
        }
        if let ReferenceMode::Fixed { values, .. } = &self.reference {
            fixed_reference(net, values.clone(), 0)?;
        }
        Ok(())
    }
}

fn convert_refs(raw: BTreeMap<String, RefEntry>) -> BTreeMap<ProsumerId, PowerRef> {
    raw.into_iter()
        .map(|(id, e)| {
            (
                ProsumerId::new(id),
                PowerRef {
                    p_mw: e.p_mw,
                    q_mvar: e.q_mvar,
                },
            )
        })
        .collect()
}
