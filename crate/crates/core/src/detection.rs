//! Recursive anomaly factor maintained per (observer, target) pair.
//!
//! Each observer keeps one [`DetectorState`] per watched neighbor. Every
//! scheduling interval the observer feeds the dead-zone-filtered energy
//! mismatch `d` (MW) into the recursion
//!
//! ```text
//! F(k) = (F(k-1) + d(k) * D(k)) / N(d(k))
//! ```
//!
//! where the rate term `D` rewards change and sustained deviation, and the
//! decay factor `N` pulls `F` back toward zero once `d` returns inside the
//! dead zone. A sustained mismatch of either sign grows `F` without bound;
//! quiet intervals divide it by `n0` each step.

use serde::{Deserialize, Serialize};

use crate::grid::ProsumerId;

/// Saturation bound for the anomaly factor. The recursion clamps here
/// instead of producing non-finite values.
pub const F_CAP: f64 = 1e300;

/// Detector tuning: decay base `n0`, rate gain `a`, dead-zone width
/// `eps_dz` (MW, shared with the mismatch filter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub n0: f64,
    pub a: f64,
    pub eps_dz: f64,
}

/// Parameter validation failures.
#[derive(Debug, thiserror::Error)]
pub enum DetectionError {
    #[error("decay base n0 must be finite and > 1, got {0}")]
    BadDecayBase(f64),
    #[error("rate gain a must be finite and > 0, got {0}")]
    BadRateGain(f64),
    #[error("dead-zone width eps_dz must be finite and > 0, got {0}")]
    BadDeadZone(f64),
}

impl DetectorParams {
    pub fn new(n0: f64, a: f64, eps_dz: f64) -> Result<Self, DetectionError> {
        if !(n0.is_finite() && n0 > 1.0) {
            return Err(DetectionError::BadDecayBase(n0));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(DetectionError::BadRateGain(a));
        }
        if !(eps_dz.is_finite() && eps_dz > 0.0) {
            return Err(DetectionError::BadDeadZone(eps_dz));
        }
        Ok(DetectorParams { n0, a, eps_dz })
    }
}

/// Rate term `D`. For a changing mismatch it is `a * (d - d_prev)`; for a
/// mismatch stuck at the same nonzero value it is `±1` matching the sign,
/// so that `d * D = |d|` keeps growing the factor; at rest it is 0 so
/// normal operation contributes nothing.
pub fn rate_term(d: f64, d_prev: f64, a: f64) -> f64 {
    debug_assert!(d.is_finite() && d_prev.is_finite() && a.is_finite());
    if d != d_prev {
        a * (d - d_prev)
    } else if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Decay factor `N`: 1 (no decay) while the mismatch is outside the dead
/// zone, `n0` once it is back inside. The boundary `|d| = eps_dz` counts
/// as inside, consistent with the dead-zone filter.
pub fn decay_factor(d: f64, params: &DetectorParams) -> f64 {
    debug_assert!(d.is_finite());
    if d.abs() > params.eps_dz {
        1.0
    } else {
        params.n0
    }
}

/// Anomaly-factor state for one (observer, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub observer: ProsumerId,
    pub target: ProsumerId,
    /// Current anomaly factor F. Always finite; clamped at [`F_CAP`].
    pub f: f64,
    /// Previous filtered mismatch, MW. Starts at 0: anomaly onset from
    /// rest contributes `a * d^2` in its first interval.
    pub d_prev: f64,
    /// Count of updates applied.
    pub k: u64,
    /// Set when the recursion ever clamped at [`F_CAP`].
    pub saturated: bool,
}

/// One detector update, in trace column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorStep {
    pub k: u64,
    /// Filtered mismatch fed in, MW.
    pub d: f64,
    /// Rate term D used.
    pub rate: f64,
    /// Decay factor N used.
    pub decay: f64,
    /// Resulting factor F.
    pub f: f64,
    pub saturated: bool,
}

impl DetectorState {
    pub fn new(observer: ProsumerId, target: ProsumerId) -> Self {
        DetectorState {
            observer,
            target,
            f: 0.0,
            d_prev: 0.0,
            k: 0,
            saturated: false,
        }
    }

    /// Applies one interval's filtered mismatch. `d` must already be
    /// dead-zone filtered; feeding raw sub-threshold values here would
    /// stop the decay branch from engaging.
    pub fn update(&mut self, d: f64, params: &DetectorParams) -> DetectorStep {
        let rate = rate_term(d, self.d_prev, params.a);
        let decay = decay_factor(d, params);
        let raw = (self.f + d * rate) / decay;
        let (f, clamped) = if raw > F_CAP {
            (F_CAP, true)
        } else if raw < -F_CAP {
            (-F_CAP, true)
        } else if raw.is_nan() {
            (F_CAP, true)
        } else {
            (raw, false)
        };
        self.f = f;
        self.saturated |= clamped;
        self.d_prev = d;
        self.k += 1;
        DetectorStep {
            k: self.k,
            d,
            rate,
            decay,
            f,
            saturated: self.saturated,
        }
    }

    /// Clears the factor and mismatch memory; used after topology changes.
    /// The interval count is preserved. Idempotent.
    pub fn reset(&mut self) {
        self.f = 0.0;
        self.d_prev = 0.0;
        self.saturated = false;
    }
}
