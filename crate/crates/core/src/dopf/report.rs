//! Serializable summary of a scheduling run.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::grid::ProsumerId;

use super::{DopfError, DopfSolution, IterationRecord, PowerRef, SolverOptions};

/// Outcome of one solver invocation, written alongside simulation output
/// so a run can be audited without re-solving.
#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub converged: bool,
    /// Outer passes run (on failure: passes before the failure).
    pub iterations: usize,
    pub wall_ms: f64,
    pub eps_consensus: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub history: Vec<IterationRecord>,
    /// Agreed references; empty when the solve failed.
    pub schedule: BTreeMap<ProsumerId, PowerRef>,
}

impl SolverReport {
    pub fn from_solution(sol: &DopfSolution, opts: &SolverOptions) -> Self {
        SolverReport {
            converged: true,
            iterations: sol.iterations(),
            wall_ms: sol.wall_ms,
            eps_consensus: opts.eps_consensus,
            error: None,
            history: sol.history.clone(),
            schedule: sol
                .schedule
                .iter()
                .map(|(id, r)| (id.clone(), *r))
                .collect(),
        }
    }

    pub fn from_error(err: &DopfError, opts: &SolverOptions) -> Self {
        let (iterations, history) = match err {
            DopfError::NonConvergence {
                iterations,
                history,
                ..
            } => (*iterations, history.clone()),
            DopfError::LineSearchStall { iteration, history } => (*iteration, history.clone()),
            _ => (0, Vec::new()),
        };
        SolverReport {
            converged: false,
            iterations,
            wall_ms: 0.0,
            eps_consensus: opts.eps_consensus,
            error: Some(err.to_string()),
            history,
            schedule: BTreeMap::new(),
        }
    }
}

/// Renders a report as TOML.
pub fn render_report(report: &SolverReport) -> String {
    toml::to_string_pretty(report).expect("report serializes to TOML")
}
