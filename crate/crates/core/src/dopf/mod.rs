//! Distributed reference scheduling.
//!
//! The solver splits the network at every tie-line with auxiliary buses,
//! lets each prosumer optimize its own star-shaped subproblem, and closes
//! the loop with a coupled consensus correction until the auxiliary pairs
//! agree. Its output is a [`ReferenceSchedule`]: the net active (and
//! reactive) power every prosumer has agreed to exchange, which probing
//! and detection later treat as ground truth.
//!
//! [`ReferenceProvider`] abstracts where schedules come from: a solver run
//! or fixed values replayed from a scenario file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grid::{Network, ProsumerId};

mod local;
mod nlp;
mod qp;
mod report;
mod solve;

pub use local::{
    audit_derivatives, local_solve, power_flow_residuals, BusState, DerivativeAudit, LocalState,
};
pub use qp::{build_derivatives, BlockDerivatives, SolverWorkspace};
pub use report::{render_report, SolverReport};
pub use solve::{
    consensus_residual, solve_dopf, ConsensusResidual, DopfSolution, IterationRecord, PairGap,
};

/// Agreed net power for one prosumer: positive = export into the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRef {
    pub p_mw: f64,
    pub q_mvar: f64,
}

/// Per-prosumer agreed reference powers, valid from a given interval.
///
/// A schedule may carry entries for prosumers no longer present in the
/// network (the last agreed value of an isolated node); consumers look up
/// by id and ignore the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSchedule {
    refs: BTreeMap<ProsumerId, PowerRef>,
    pub valid_from: u64,
}

impl ReferenceSchedule {
    pub fn new(refs: BTreeMap<ProsumerId, PowerRef>, valid_from: u64) -> Self {
        ReferenceSchedule { refs, valid_from }
    }

    pub fn p_ref(&self, id: &ProsumerId) -> Option<f64> {
        self.refs.get(id).map(|r| r.p_mw)
    }

    pub fn q_ref(&self, id: &ProsumerId) -> Option<f64> {
        self.refs.get(id).map(|r| r.q_mvar)
    }

    pub fn get(&self, id: &ProsumerId) -> Option<&PowerRef> {
        self.refs.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ProsumerId> {
        self.refs.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ProsumerId, &PowerRef)> {
        self.refs.iter()
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Net active power summed over the prosumers present in `net`, MW.
    /// At a consistent operating point this equals the network losses.
    pub fn balance_over(&self, net: &Network) -> f64 {
        net.ids().filter_map(|id| self.p_ref(id)).sum()
    }
}

/// Builds a fixed schedule from explicit (id, P, Q) entries, checking
/// that every prosumer of `net` is covered. An empty network yields an
/// empty schedule regardless of the entries.
pub fn fixed_reference(
    net: &Network,
    entries: impl IntoIterator<Item = (ProsumerId, PowerRef)>,
    valid_from: u64,
) -> Result<ReferenceSchedule, DopfError> {
    let refs: BTreeMap<ProsumerId, PowerRef> = entries.into_iter().collect();
    if let Some(missing) = net.ids().find(|id| !refs.contains_key(*id)) {
        return Err(DopfError::MissingReference(missing.clone()));
    }
    Ok(ReferenceSchedule::new(refs, valid_from))
}

/// Scheduling failures.
#[derive(Debug, thiserror::Error)]
pub enum DopfError {
    #[error("consensus did not converge in {iterations} iterations (max residual {max_residual:.6e})")]
    NonConvergence {
        iterations: usize,
        max_residual: f64,
        /// Per-iteration residual/step trace for post-mortems.
        history: Vec<IterationRecord>,
    },
    #[error("merit line search stalled at iteration {iteration}")]
    LineSearchStall {
        iteration: usize,
        history: Vec<IterationRecord>,
    },
    #[error("local solve failed for `{id}`: {reason}")]
    LocalSolveFailed { id: ProsumerId, reason: String },
    #[error("consensus system is singular at iteration {iteration} (condition estimate {condition:.3e}); enable regularization")]
    SingularConsensus { iteration: usize, condition: f64 },
    #[error("no reference value for prosumer `{0}`")]
    MissingReference(ProsumerId),
    #[error("prosumers `{a}` and `{b}` do not share an auxiliary pair")]
    PairNotShared { a: ProsumerId, b: ProsumerId },
}

/// Hessian handling for the coupled consensus step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegPolicy {
    /// Add a scaled identity and escalate until the reduced system
    /// factorizes. Default.
    Adaptive,
    /// Fail with [`DopfError::SingularConsensus`] instead of regularizing.
    None,
}

/// Solver tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Consensus tolerance on the auxiliary-pair residual, per-unit.
    pub eps_consensus: f64,
    /// Cap on outer consensus iterations.
    pub max_iters: usize,
    /// Cap on inner iterations of each local solve.
    pub local_iters: usize,
    /// Initial consensus price.
    pub lambda_init: f64,
    pub regularization: RegPolicy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            eps_consensus: 1e-4,
            max_iters: 200,
            local_iters: 200,
            lambda_init: 10.0,
            regularization: RegPolicy::Adaptive,
        }
    }
}

/// Source of reference schedules, consulted at start-up and again after
/// every topology change.
pub trait ReferenceProvider {
    fn references(&self, net: &Network, valid_from: u64) -> Result<ReferenceSchedule, DopfError>;
}

/// Replays fixed schedules: one for the initial network and optionally a
/// second applied after the first topology change. Entries for absent
/// prosumers are carried through unchanged.
#[derive(Debug, Clone)]
pub struct FixedReferenceProvider {
    initial: BTreeMap<ProsumerId, PowerRef>,
    post_isolation: Option<BTreeMap<ProsumerId, PowerRef>>,
}

impl FixedReferenceProvider {
    pub fn new(
        initial: BTreeMap<ProsumerId, PowerRef>,
        post_isolation: Option<BTreeMap<ProsumerId, PowerRef>>,
    ) -> Self {
        FixedReferenceProvider {
            initial,
            post_isolation,
        }
    }
}

impl ReferenceProvider for FixedReferenceProvider {
    fn references(&self, net: &Network, valid_from: u64) -> Result<ReferenceSchedule, DopfError> {
        // The initial map is sized for the full network; a request for a
        // reduced one means topology changed, which switches to the
        // post-isolation map when the scenario supplies it.
        let reduced = net.prosumer_count() < self.initial.len();
        let chosen = match (&self.post_isolation, reduced) {
            (Some(post), true) => post,
            _ => &self.initial,
        };
        if let Some(missing) = net.ids().find(|id| !chosen.contains_key(*id)) {
            return Err(DopfError::MissingReference(missing.clone()));
        }
        Ok(ReferenceSchedule::new(chosen.clone(), valid_from))
    }
}

/// Solves the distributed OPF on each request.
#[derive(Debug, Clone, Default)]
pub struct SolverProvider {
    pub options: SolverOptions,
}

impl ReferenceProvider for SolverProvider {
    fn references(&self, net: &Network, valid_from: u64) -> Result<ReferenceSchedule, DopfError> {
        let solution = solve_dopf(&crate::grid::decouple(net), &self.options)?;
        let mut schedule = solution.schedule;
        schedule.valid_from = valid_from;
        Ok(schedule)
    }
}
