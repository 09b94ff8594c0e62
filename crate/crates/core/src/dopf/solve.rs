//! Outer consensus loop.
//!
//! Each pass: (1) every prosumer re-solves its star against the midpoint
//! values its neighbors last published, (2) the auxiliary-pair residuals
//! are checked against the consensus tolerance, (3) derivatives are
//! collected, (4) one coupled equality-constrained QP produces a Newton
//! step and fresh prices, (5) a backtracking line search on an exact-
//! penalty merit accepts the step. Only primal physical values move in
//! step 5; multipliers and prices are refreshed by the next pass.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use crate::grid::{DecoupledNetwork, ProsumerId};

use super::local::{flow_p, local_solve, LocalState, MidpointTargets, StarProblem};
use super::nlp::BoxNlp;
use super::qp::{build_derivatives, consensus_step, Layout};
use super::{DopfError, PowerRef, ReferenceSchedule, SolverOptions};

/// Signed disagreement components of one auxiliary pair: midpoint copies
/// should match, half-line powers should cancel. Per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsensusResidual {
    pub delta_gap: f64,
    pub v_gap: f64,
    pub p_sum: f64,
    pub q_sum: f64,
}

impl ConsensusResidual {
    /// The scalar residual the convergence test uses: sum of absolute
    /// components.
    pub fn total(&self) -> f64 {
        self.delta_gap.abs() + self.v_gap.abs() + self.p_sum.abs() + self.q_sum.abs()
    }
}

/// Disagreement between two prosumers' copies of their shared midpoint.
pub fn consensus_residual(
    a: &LocalState,
    b: &LocalState,
) -> Result<ConsensusResidual, DopfError> {
    let not_shared = || DopfError::PairNotShared {
        a: a.owner.clone(),
        b: b.owner.clone(),
    };
    let sa = a.aux.get(&b.owner).ok_or_else(not_shared)?;
    let sb = b.aux.get(&a.owner).ok_or_else(not_shared)?;
    Ok(ConsensusResidual {
        delta_gap: sa.delta_rad - sb.delta_rad,
        v_gap: sa.v_pu - sb.v_pu,
        p_sum: sa.p_pu + sb.p_pu,
        q_sum: sa.q_pu + sb.q_pu,
    })
}

/// One outer pass of the consensus loop, for reports and post-mortems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Largest auxiliary-pair residual before the step.
    pub max_residual: f64,
    /// Accepted line-search step; 0 on the final (converged) pass.
    pub step_length: f64,
    /// Exact-penalty merit after the pass.
    pub merit: f64,
}

/// A pair's residual at the solution, keyed by both endpoints.
#[derive(Debug, Clone)]
pub struct PairGap {
    pub i: ProsumerId,
    pub j: ProsumerId,
    pub residual: ConsensusResidual,
}

/// Converged distributed schedule plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct DopfSolution {
    pub schedule: ReferenceSchedule,
    pub history: Vec<IterationRecord>,
    pub states: BTreeMap<ProsumerId, LocalState>,
    pub wall_ms: f64,
}

impl DopfSolution {
    /// Outer passes run, including the final converged one. Zero when the
    /// network has no couplings.
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// Total series loss over every half-line segment, MW. The schedule's
    /// net-power sum equals this at a consistent operating point.
    pub fn losses_mw(&self, dec: &DecoupledNetwork) -> f64 {
        let mut total = 0.0;
        for pair in dec.pairs() {
            for (near, far) in [(&pair.i, &pair.j), (&pair.j, &pair.i)] {
                let st = &self.states[near];
                let c = st.center;
                let m = st.aux[far];
                total += flow_p(c.v_pu, m.v_pu, c.delta_rad - m.delta_rad, pair.attachment)
                    + flow_p(m.v_pu, c.v_pu, m.delta_rad - c.delta_rad, pair.attachment);
            }
        }
        total * dec.base().base_mva()
    }

    /// Residuals of every auxiliary pair at the solution.
    pub fn pair_gaps(&self, dec: &DecoupledNetwork) -> Result<Vec<PairGap>, DopfError> {
        dec.pairs()
            .iter()
            .map(|pair| {
                let residual =
                    consensus_residual(&self.states[&pair.i], &self.states[&pair.j])?;
                Ok(PairGap {
                    i: pair.i.clone(),
                    j: pair.j.clone(),
                    residual,
                })
            })
            .collect()
    }
}

/// Precomputed pieces for evaluating the exact-penalty merit
/// cost + rho * (power-flow residual + pair disagreement + bound
/// violation) at arbitrary stacked physical points.
struct MeritContext {
    problems: Vec<StarProblem>,
    layout: Layout,
    /// Global base indices (aux of i toward j, aux of j toward i).
    pair_indices: Vec<(usize, usize)>,
}

impl MeritContext {
    fn new(dec: &DecoupledNetwork) -> Result<Self, DopfError> {
        let layout = Layout::of(dec);
        let mut problems = Vec::with_capacity(layout.ids.len());
        for id in &layout.ids {
            let owner = dec.base().prosumer(id).expect("prosumer in network");
            problems.push(StarProblem::physical(owner, dec)?);
        }
        let pair_indices = dec
            .pairs()
            .iter()
            .map(|p| (layout.aux_base(&p.i, &p.j), layout.aux_base(&p.j, &p.i)))
            .collect();
        Ok(MeritContext {
            problems,
            layout,
            pair_indices,
        })
    }

    fn merit(&self, x: &DVector<f64>, rho: f64) -> f64 {
        let mut cost = 0.0;
        let mut viol = 0.0;
        for (b, prob) in self.problems.iter().enumerate() {
            let o = self.layout.offsets[b];
            let dim = self.layout.dims[b];
            let mut xf = DVector::zeros(prob.dim());
            for i in 0..dim {
                xf[i] = x[o + i];
            }
            // Physical problems carry zero prices and zero splits, so the
            // objective reduces to the production cost.
            cost += prob.objective(&xf, None);
            let mut c = DVector::zeros(prob.num_eq());
            prob.constraints(&xf, &mut c);
            for r in 0..2 + 2 * prob.degree() {
                viol += c[r].abs();
            }
            let (lo, up) = (prob.lower(), prob.upper());
            for i in 0..dim {
                viol += (lo[i] - xf[i]).max(0.0) + (xf[i] - up[i]).max(0.0);
            }
        }
        for &(ai, aj) in &self.pair_indices {
            viol += (x[ai] - x[aj]).abs()
                + (x[ai + 1] - x[aj + 1]).abs()
                + (x[ai + 2] + x[aj + 2]).abs()
                + (x[ai + 3] + x[aj + 3]).abs();
        }
        cost + rho * viol
    }
}

/// Backtracking line search on the exact-penalty merit. Returns the
/// accepted step length, the new point and its merit.
fn line_search(
    ctx: &MeritContext,
    x: &DVector<f64>,
    delta: &DVector<f64>,
    rho: f64,
    model_decrease: f64,
    iteration: usize,
    history: &[IterationRecord],
) -> Result<(f64, DVector<f64>, f64), DopfError> {
    let phi0 = ctx.merit(x, rho);
    let mut alpha = 1.0f64;
    loop {
        let xn = x + delta * alpha;
        let phi = ctx.merit(&xn, rho);
        if phi <= phi0 - 1e-4 * alpha * model_decrease + 1e-10 {
            return Ok((alpha, xn, phi));
        }
        alpha *= 0.5;
        if alpha < 1e-6 {
            return Err(DopfError::LineSearchStall {
                iteration,
                history: history.to_vec(),
            });
        }
    }
}

fn targets_of(
    states: &BTreeMap<ProsumerId, LocalState>,
    id: &ProsumerId,
    dec: &DecoupledNetwork,
) -> MidpointTargets {
    let mut targets = MidpointTargets::new();
    for far in dec.attachments_of(id).into_keys() {
        let bus = states[&far].aux[id];
        targets.insert(far, bus);
    }
    targets
}

fn extract_schedule(
    states: &BTreeMap<ProsumerId, LocalState>,
    dec: &DecoupledNetwork,
) -> ReferenceSchedule {
    let mut refs = BTreeMap::new();
    for p in dec.base().prosumers() {
        let st = &states[&p.id];
        refs.insert(
            p.id.clone(),
            PowerRef {
                p_mw: st.p_mw() - p.load_p,
                q_mvar: st.q_mvar() - p.load_q,
            },
        );
    }
    ReferenceSchedule::new(refs, 0)
}

/// Computes the agreed reference schedule on a decoupled network.
///
/// Every prosumer's reference is its scheduled production minus its own
/// load, so the references sum to the network series losses.
pub fn solve_dopf(
    dec: &DecoupledNetwork,
    opts: &SolverOptions,
) -> Result<DopfSolution, DopfError> {
    let start = Instant::now();
    let net = dec.base();
    let mut states: BTreeMap<ProsumerId, LocalState> = net
        .prosumers()
        .map(|p| (p.id.clone(), LocalState::flat(p, dec, opts.lambda_init)))
        .collect();

    if dec.pairs().is_empty() {
        // No couplings to agree on: each prosumer covers its own load and
        // the agreed exchange is the negated load. Zero coupling passes.
        let mut refs = BTreeMap::new();
        for p in net.prosumers() {
            let st = states.get_mut(&p.id).expect("state for prosumer");
            st.center.p_pu = p.load_p / st.base_mva;
            st.center.q_pu = p.load_q / st.base_mva;
            st.cost = p.cost.evaluate(p.load_p);
            refs.insert(
                p.id.clone(),
                PowerRef {
                    p_mw: -p.load_p,
                    q_mvar: -p.load_q,
                },
            );
        }
        return Ok(DopfSolution {
            schedule: ReferenceSchedule::new(refs, 0),
            history: Vec::new(),
            states,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let ctx = MeritContext::new(dec)?;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut rho = 1.0f64;
    let mut last_max = f64::INFINITY;

    for iter in 0..opts.max_iters {
        // Step 1: local solves against the last published midpoints.
        let snapshot = states.clone();
        for p in net.prosumers() {
            let targets = targets_of(&snapshot, &p.id, dec);
            let solved = local_solve(&snapshot[&p.id], p, dec, &targets, opts)?;
            states.insert(p.id.clone(), solved);
        }
        // Step 2: convergence on the auxiliary pairs.
        let mut max_a = 0.0f64;
        for pair in dec.pairs() {
            let r = consensus_residual(&states[&pair.i], &states[&pair.j])?;
            max_a = max_a.max(r.total());
        }
        last_max = max_a;
        if max_a < opts.eps_consensus {
            let x = ctx.layout.gather(&states);
            history.push(IterationRecord {
                iteration: iter,
                max_residual: max_a,
                step_length: 0.0,
                merit: ctx.merit(&x, rho),
            });
            return Ok(DopfSolution {
                schedule: extract_schedule(&states, dec),
                history,
                states,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }

        // Step 3: derivatives at the local solutions.
        let mut ws = build_derivatives(&states, dec, iter)?;

        // Step 4: coupled consensus QP; its multipliers set the prices.
        let step = consensus_step(&ws, &states, dec, rho, opts.regularization)?;
        rho = step.rho;
        for ((i, j), duals) in &step.pair_duals {
            let mag = duals.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            let lam = (1.2 * mag).clamp(opts.lambda_init, 1e4);
            if let Some(s) = states.get_mut(i) {
                s.lambda.insert(j.clone(), lam);
            }
            if let Some(s) = states.get_mut(j) {
                s.lambda.insert(i.clone(), lam);
            }
        }

        // Step 5: merit line search, then apply the step.
        let x = ctx.layout.gather(&states);
        let (alpha, xn, merit_after) = line_search(
            &ctx,
            &x,
            &step.delta,
            rho,
            step.model_decrease,
            iter,
            &history,
        )?;
        ws.step_length = alpha;
        ctx.layout.scatter(&xn, &mut states);
        history.push(IterationRecord {
            iteration: iter,
            max_residual: max_a,
            step_length: alpha,
            merit: merit_after,
        });
    }

    Err(DopfError::NonConvergence {
        iterations: opts.max_iters,
        max_residual: last_max,
        history,
    })
}
