//! Per-prosumer local subproblem on the decoupled network.
//!
//! Each prosumer owns a star: its center bus plus one auxiliary bus per
//! tie-line, attached through twice the line admittance. The local solve
//! minimizes its production cost plus price-weighted disagreement with the
//! neighbors' last published midpoint values, subject to AC power-flow
//! equalities on the star and the operating box bounds.
//!
//! The disagreement terms are exact-penalty L1 norms, smoothed by the
//! usual nonnegative split: a term lambda*|u| becomes lambda*(s+ + s-)
//! with the equality u - s+ + s- = 0 and s+, s- >= 0.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::grid::{Admittance, DecoupledNetwork, Prosumer, ProsumerId};

use super::nlp::{solve_box_nlp, BoxNlp, NlpOptions};
use super::{DopfError, SolverOptions};

/// One bus's primal values, per-unit (angle in radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BusState {
    pub v_pu: f64,
    pub delta_rad: f64,
    pub p_pu: f64,
    pub q_pu: f64,
}

/// A prosumer's local solution: center bus, one auxiliary midpoint copy
/// per neighbor, and the consensus prices in force when it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub owner: ProsumerId,
    pub base_mva: f64,
    pub center: BusState,
    /// Auxiliary midpoint copies keyed by the far-side neighbor.
    pub aux: BTreeMap<ProsumerId, BusState>,
    /// Consensus price per neighbor coupling.
    pub lambda: BTreeMap<ProsumerId, f64>,
    /// Multipliers of the power-flow rows (center P, Q then per-neighbor
    /// aux P, Q), used as curvature weights in the consensus step.
    pub(crate) pf_duals: Vec<f64>,
    /// Full multiplier vector for warm-starting the next solve.
    pub(crate) nu_warm: Vec<f64>,
    /// Production cost at the solution, currency/h.
    pub cost: f64,
}

impl LocalState {
    /// Flat-start state: V = 1, angles 0, production clamped to bounds
    /// around the local load, empty midpoints at flat values.
    pub fn flat(owner: &Prosumer, dec: &DecoupledNetwork, lambda_init: f64) -> Self {
        let base = dec.base().base_mva();
        let center = BusState {
            v_pu: 1.0f64.clamp(owner.v_bounds.min, owner.v_bounds.max),
            delta_rad: 0.0,
            p_pu: (owner.load_p / base).clamp(owner.p_bounds.min / base, owner.p_bounds.max / base),
            q_pu: (owner.load_q / base).clamp(owner.q_bounds.min / base, owner.q_bounds.max / base),
        };
        let mut aux = BTreeMap::new();
        let mut lambda = BTreeMap::new();
        for far in dec.attachments_of(&owner.id).keys() {
            aux.insert(
                far.clone(),
                BusState {
                    v_pu: 1.0,
                    delta_rad: 0.0,
                    p_pu: 0.0,
                    q_pu: 0.0,
                },
            );
            lambda.insert(far.clone(), lambda_init);
        }
        LocalState {
            owner: owner.id.clone(),
            base_mva: base,
            center,
            aux,
            lambda,
            pf_duals: Vec::new(),
            nu_warm: Vec::new(),
            cost: owner.cost.evaluate(center.p_pu * base),
        }
    }

    /// Dispatchable production, MW.
    pub fn p_mw(&self) -> f64 {
        self.center.p_pu * self.base_mva
    }

    /// Dispatchable production, MVAr.
    pub fn q_mvar(&self) -> f64 {
        self.center.q_pu * self.base_mva
    }
}

/// Published midpoint values a local solve couples against: for prosumer
/// i's neighbor j this is j's copy of the shared midpoint.
pub(crate) type MidpointTargets = BTreeMap<ProsumerId, BusState>;

// Wide technical bounds for quantities without operating limits.
const AUX_V_MIN: f64 = 0.5;
const AUX_V_MAX: f64 = 1.5;
const AUX_PQ_LIM: f64 = 20.0;
const SPLIT_MAX: f64 = 1e3;

/// Star NLP data, laid out as
/// `[Vc dc Pc Qc | per neighbor: Vb db Pb Qb | per neighbor: 8 splits]`.
pub(crate) struct StarProblem {
    cost_c2: f64,
    cost_c1: f64,
    cost_c0: f64,
    base: f64,
    load_p_pu: f64,
    load_q_pu: f64,
    /// Per neighbor: attachment admittance, price, published midpoint.
    pub(crate) neighbors: Vec<(ProsumerId, Admittance, f64, BusState)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl StarProblem {
    pub(crate) fn new(
        owner: &Prosumer,
        dec: &DecoupledNetwork,
        lambda: &BTreeMap<ProsumerId, f64>,
        targets: &MidpointTargets,
    ) -> Result<Self, DopfError> {
        let base = dec.base().base_mva();
        let mut neighbors = Vec::new();
        for (far, att) in dec.attachments_of(&owner.id) {
            let lam = *lambda.get(&far).ok_or_else(|| DopfError::LocalSolveFailed {
                id: owner.id.clone(),
                reason: format!("no consensus price for coupling with `{far}`"),
            })?;
            let z = *targets.get(&far).ok_or_else(|| DopfError::LocalSolveFailed {
                id: owner.id.clone(),
                reason: format!("no published midpoint from `{far}`"),
            })?;
            neighbors.push((far, att, lam, z));
        }

        let d = neighbors.len();
        let nv = 4 * (1 + d);
        let n = nv + 8 * d;
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        if owner.is_slack {
            lower[0] = 1.0;
            upper[0] = 1.0;
            lower[1] = 0.0;
            upper[1] = 0.0;
        } else {
            lower[0] = owner.v_bounds.min;
            upper[0] = owner.v_bounds.max;
            lower[1] = -PI;
            upper[1] = PI;
        }
        lower[2] = owner.p_bounds.min / base;
        upper[2] = owner.p_bounds.max / base;
        lower[3] = owner.q_bounds.min / base;
        upper[3] = owner.q_bounds.max / base;
        for k in 0..d {
            let b = 4 + 4 * k;
            lower[b] = AUX_V_MIN;
            upper[b] = AUX_V_MAX;
            lower[b + 1] = -PI;
            upper[b + 1] = PI;
            for off in 2..4 {
                lower[b + off] = -AUX_PQ_LIM;
                upper[b + off] = AUX_PQ_LIM;
            }
            for off in 0..8 {
                lower[nv + 8 * k + off] = 0.0;
                upper[nv + 8 * k + off] = SPLIT_MAX;
            }
        }

        Ok(StarProblem {
            cost_c2: owner.cost.c2,
            cost_c1: owner.cost.c1,
            cost_c0: owner.cost.c0,
            base,
            load_p_pu: owner.load_p / base,
            load_q_pu: owner.load_q / base,
            neighbors,
            lower,
            upper,
        })
    }

    /// Star data with zero prices and flat midpoint targets, for callers
    /// that only evaluate the physical objective and constraints.
    pub(crate) fn physical(owner: &Prosumer, dec: &DecoupledNetwork) -> Result<Self, DopfError> {
        let mut lambda = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for far in dec.attachments_of(&owner.id).into_keys() {
            lambda.insert(far.clone(), 0.0);
            targets.insert(
                far,
                BusState {
                    v_pu: 1.0,
                    ..BusState::default()
                },
            );
        }
        StarProblem::new(owner, dec, &lambda, &targets)
    }

    pub(crate) fn degree(&self) -> usize {
        self.neighbors.len()
    }

    fn nv(&self) -> usize {
        4 * (1 + self.degree())
    }

    /// Mismatch components against the published midpoints for neighbor
    /// slot k at physical values x: (delta gap, V gap, P sum, Q sum).
    fn mismatches(&self, x: &DVector<f64>, k: usize) -> [f64; 4] {
        let b = 4 + 4 * k;
        let z = &self.neighbors[k].3;
        [
            x[b + 1] - z.delta_rad,
            x[b] - z.v_pu,
            x[b + 2] + z.p_pu,
            x[b + 3] + z.q_pu,
        ]
    }

    /// Initial point: physical block from `state`, split variables set to
    /// the exact decomposition of the current mismatches.
    pub(crate) fn initial_point(&self, state: &LocalState) -> DVector<f64> {
        let n = self.dim();
        let mut x = DVector::zeros(n);
        x[0] = state.center.v_pu;
        x[1] = state.center.delta_rad;
        x[2] = state.center.p_pu;
        x[3] = state.center.q_pu;
        for (k, (far, _, _, _)) in self.neighbors.iter().enumerate() {
            let bus = state.aux.get(far).copied().unwrap_or(BusState {
                v_pu: 1.0,
                ..BusState::default()
            });
            let b = 4 + 4 * k;
            x[b] = bus.v_pu;
            x[b + 1] = bus.delta_rad;
            x[b + 2] = bus.p_pu;
            x[b + 3] = bus.q_pu;
        }
        for k in 0..self.degree() {
            let u = self.mismatches(&x, k);
            let s = self.nv() + 8 * k;
            for (c, &val) in u.iter().enumerate() {
                x[s + 2 * c] = val.max(0.0);
                x[s + 2 * c + 1] = (-val).max(0.0);
            }
        }
        x
    }

    /// Voltage-coordinate indices (V and delta of every bus); the only
    /// dimensions with constraint curvature.
    fn voltage_dims(&self) -> Vec<usize> {
        let mut dims = vec![0, 1];
        for k in 0..self.degree() {
            dims.push(4 + 4 * k);
            dims.push(4 + 4 * k + 1);
        }
        dims
    }
}

/// Branch flow out of the `from` bus into a line with admittance y,
/// theta = delta_from - delta_to. Standard AC injection form.
pub(crate) fn flow_p(v_from: f64, v_to: f64, theta: f64, y: Admittance) -> f64 {
    v_from * v_from * y.g - v_from * v_to * (y.g * theta.cos() + y.b * theta.sin())
}

pub(crate) fn flow_q(v_from: f64, v_to: f64, theta: f64, y: Admittance) -> f64 {
    -v_from * v_from * y.b - v_from * v_to * (y.g * theta.sin() - y.b * theta.cos())
}

impl BoxNlp for StarProblem {
    fn dim(&self) -> usize {
        self.nv() + 8 * self.degree()
    }

    fn num_eq(&self) -> usize {
        2 + 6 * self.degree()
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn objective(&self, x: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64 {
        // Production cost over base_mva: gradient wrt per-unit P equals
        // the marginal cost in currency/MWh.
        let p_mw = x[2] * self.base;
        let mut f =
            (self.cost_c2 * p_mw * p_mw + self.cost_c1 * p_mw + self.cost_c0) / self.base;
        let nv = self.nv();
        for (k, (_, _, lam, _)) in self.neighbors.iter().enumerate() {
            for off in 0..8 {
                f += lam * x[nv + 8 * k + off];
            }
        }
        if let Some(g) = grad {
            g.fill(0.0);
            g[2] = 2.0 * self.cost_c2 * p_mw + self.cost_c1;
            for (k, (_, _, lam, _)) in self.neighbors.iter().enumerate() {
                for off in 0..8 {
                    g[nv + 8 * k + off] = *lam;
                }
            }
        }
        f
    }

    fn constraints(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let (vc, dc) = (x[0], x[1]);
        let mut sum_p = 0.0;
        let mut sum_q = 0.0;
        for (k, (_, y, _, _)) in self.neighbors.iter().enumerate() {
            let b = 4 + 4 * k;
            let (vb, db) = (x[b], x[b + 1]);
            sum_p += flow_p(vc, vb, dc - db, *y);
            sum_q += flow_q(vc, vb, dc - db, *y);
            out[2 + 2 * k] = flow_p(vb, vc, db - dc, *y) - x[b + 2];
            out[2 + 2 * k + 1] = flow_q(vb, vc, db - dc, *y) - x[b + 3];
        }
        out[0] = sum_p - (x[2] - self.load_p_pu);
        out[1] = sum_q - (x[3] - self.load_q_pu);

        let nv = self.nv();
        let row0 = 2 + 2 * self.degree();
        for k in 0..self.degree() {
            let u = self.mismatches(x, k);
            let s = nv + 8 * k;
            for (c, &val) in u.iter().enumerate() {
                out[row0 + 4 * k + c] = val - x[s + 2 * c] + x[s + 2 * c + 1];
            }
        }
    }

    fn jacobian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        let (vc, dc) = (x[0], x[1]);
        for (k, (_, y, _, _)) in self.neighbors.iter().enumerate() {
            let b = 4 + 4 * k;
            let (vb, db) = (x[b], x[b + 1]);
            let theta = dc - db;
            let e = y.g * theta.cos() + y.b * theta.sin();
            let fq = y.g * theta.sin() - y.b * theta.cos();

            // Center P balance row.
            out[(0, 0)] += 2.0 * vc * y.g - vb * e;
            out[(0, 1)] += vc * vb * fq;
            out[(0, b)] = -vc * e;
            out[(0, b + 1)] = -vc * vb * fq;
            // Center Q balance row.
            out[(1, 0)] += -2.0 * vc * y.b - vb * fq;
            out[(1, 1)] += -vc * vb * e;
            out[(1, b)] = -vc * fq;
            out[(1, b + 1)] = vc * vb * e;

            // Aux rows use theta' = -theta.
            let e2 = y.g * theta.cos() - y.b * theta.sin();
            let f2 = -y.g * theta.sin() - y.b * theta.cos();
            let rp = 2 + 2 * k;
            out[(rp, b)] = 2.0 * vb * y.g - vc * e2;
            out[(rp, b + 1)] = vb * vc * f2;
            out[(rp, 0)] = -vb * e2;
            out[(rp, 1)] = -vb * vc * f2;
            out[(rp, b + 2)] = -1.0;
            out[(rp + 1, b)] = -2.0 * vb * y.b - vc * f2;
            out[(rp + 1, b + 1)] = -vb * vc * e2;
            out[(rp + 1, 0)] = -vb * f2;
            out[(rp + 1, 1)] = vb * vc * e2;
            out[(rp + 1, b + 3)] = -1.0;
        }
        out[(0, 2)] = -1.0;
        out[(1, 3)] = -1.0;

        let nv = self.nv();
        let row0 = 2 + 2 * self.degree();
        for k in 0..self.degree() {
            let b = 4 + 4 * k;
            let s = nv + 8 * k;
            // Component order: delta, V, P, Q; physical columns in that order.
            let phys = [b + 1, b, b + 2, b + 3];
            for c in 0..4 {
                let r = row0 + 4 * k + c;
                out[(r, phys[c])] = 1.0;
                out[(r, s + 2 * c)] = -1.0;
                out[(r, s + 2 * c + 1)] = 1.0;
            }
        }
    }

    fn lagrangian_hessian(&self, x: &DVector<f64>, sigma: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        out[(2, 2)] = 2.0 * self.cost_c2 * self.base;
        add_constraint_curvature(self, x, sigma, &self.voltage_dims(), out);
    }

    fn multiplier_bound(&self, row: usize) -> f64 {
        // Split rows implement lambda*|u|; their multiplier can never
        // exceed the price in magnitude.
        let pf = 2 + 2 * self.degree();
        if row < pf {
            f64::INFINITY
        } else {
            self.neighbors[(row - pf) / 4].2
        }
    }
}

/// Adds sum_k sigma_k * hess(c_k) to `out` by central differences of the
/// analytic Jacobian over the given dimensions. Only voltage coordinates
/// carry curvature in the star problem, so the probe set stays small.
pub(crate) fn add_constraint_curvature(
    p: &impl BoxNlp,
    x: &DVector<f64>,
    sigma: &DVector<f64>,
    dims: &[usize],
    out: &mut DMatrix<f64>,
) {
    let m = p.num_eq();
    let n = p.dim();
    let mut jp = DMatrix::zeros(m, n);
    let mut jm = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for &i in dims {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        p.jacobian(&xp, &mut jp);
        xp[i] = x[i] - h;
        p.jacobian(&xp, &mut jm);
        xp[i] = x[i];
        let col = (jp.transpose() * sigma - jm.transpose() * sigma) / (2.0 * h);
        for r in 0..n {
            out[(r, i)] += 0.5 * col[r];
            out[(i, r)] += 0.5 * col[r];
        }
    }
}

/// Solves one prosumer's star subproblem against the published midpoints.
///
/// `state` supplies the warm start and the prices; the result carries the
/// same prices with updated primal values and multipliers.
pub fn local_solve(
    state: &LocalState,
    owner: &Prosumer,
    dec: &DecoupledNetwork,
    targets: &MidpointTargets,
    opts: &SolverOptions,
) -> Result<LocalState, DopfError> {
    let problem = StarProblem::new(owner, dec, &state.lambda, targets)?;
    let x0 = problem.initial_point(state);
    let warm = if state.nu_warm.len() == problem.num_eq() {
        Some(DVector::from_vec(state.nu_warm.clone()))
    } else {
        None
    };
    let nlp_opts = NlpOptions {
        max_inner: opts.local_iters,
        ..NlpOptions::default()
    };
    let result = solve_box_nlp(&problem, &x0, warm.as_ref(), &nlp_opts).map_err(|e| {
        DopfError::LocalSolveFailed {
            id: owner.id.clone(),
            reason: e.to_string(),
        }
    })?;

    let x = &result.x;
    let mut aux = BTreeMap::new();
    for (k, (far, _, _, _)) in problem.neighbors.iter().enumerate() {
        let b = 4 + 4 * k;
        aux.insert(
            far.clone(),
            BusState {
                v_pu: x[b],
                delta_rad: x[b + 1],
                p_pu: x[b + 2],
                q_pu: x[b + 3],
            },
        );
    }
    let n_pf = 2 + 2 * problem.degree();
    let p_mw = x[2] * dec.base().base_mva();
    Ok(LocalState {
        owner: owner.id.clone(),
        base_mva: dec.base().base_mva(),
        center: BusState {
            v_pu: x[0],
            delta_rad: x[1],
            p_pu: x[2],
            q_pu: x[3],
        },
        aux,
        lambda: state.lambda.clone(),
        pf_duals: result.multipliers.as_slice()[..n_pf].to_vec(),
        nu_warm: result.multipliers.as_slice().to_vec(),
        cost: owner.cost.evaluate(p_mw),
    })
}

/// Power-balance residuals of one prosumer's star at the values held in
/// `state`: center P and Q rows first, then a (P, Q) pair per auxiliary
/// bus in neighbor id order. All per-unit.
pub fn power_flow_residuals(
    state: &LocalState,
    owner: &Prosumer,
    dec: &DecoupledNetwork,
) -> Result<Vec<f64>, DopfError> {
    let problem = StarProblem::physical(owner, dec)?;
    let x = problem.initial_point(state);
    let mut c = DVector::zeros(problem.num_eq());
    problem.constraints(&x, &mut c);
    Ok(c.as_slice()[..2 + 2 * problem.degree()].to_vec())
}

/// Worst scaled disagreement between analytic derivatives and central
/// finite differences over every star subproblem of a network.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeAudit {
    /// Objective gradient entries: max of `|fd - g| / max(1, |g|, |fd|)`.
    pub worst_gradient: f64,
    /// Constraint Jacobian entries, same scaling.
    pub worst_jacobian: f64,
    /// Evaluation points actually checked.
    pub points: usize,
}

// splitmix64: enough to scatter evaluation points reproducibly without
// pulling an RNG dependency into the library.
fn scatter(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Derivative checker in the tradition of interior-point solvers: builds
/// each prosumer's star subproblem with scattered consensus prices and
/// midpoint targets, then compares the analytic objective gradient and
/// constraint Jacobian against central finite differences at `samples`
/// strictly interior points per problem. `seed` fixes the scatter; the
/// step is `1e-6 * max(1, |x_i|)` per coordinate.
pub fn audit_derivatives(
    dec: &DecoupledNetwork,
    samples: usize,
    seed: u64,
) -> Result<DerivativeAudit, DopfError> {
    let mut rng = seed;
    let mut audit = DerivativeAudit {
        worst_gradient: 0.0,
        worst_jacobian: 0.0,
        points: 0,
    };
    let scale = |a: f64, b: f64| (a - b).abs() / 1f64.max(a.abs()).max(b.abs());

    for owner in dec.base().prosumers() {
        let mut lambda = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for far in dec.attachments_of(&owner.id).into_keys() {
            lambda.insert(far.clone(), 5.0 * scatter(&mut rng));
            targets.insert(
                far,
                BusState {
                    v_pu: 1.0 + 0.05 * (scatter(&mut rng) - 0.5),
                    delta_rad: 0.2 * (scatter(&mut rng) - 0.5),
                    p_pu: 0.4 * (scatter(&mut rng) - 0.5),
                    q_pu: 0.4 * (scatter(&mut rng) - 0.5),
                },
            );
        }
        let problem = StarProblem::new(owner, dec, &lambda, &targets)?;
        let n = problem.dim();
        let m = problem.num_eq();

        for _ in 0..samples {
            // Strictly interior, away from the box edges; degenerate
            // (pinned) coordinates sit on their only feasible value.
            // Wide technical boxes (the penalty splits) are sampled near
            // their lower edge: realistic values, and keeping |f| small
            // preserves the difference quotient's precision.
            let mut x = DVector::zeros(n);
            for i in 0..n {
                let (lo, hi) = (problem.lower()[i], problem.upper()[i]);
                x[i] = lo + (0.3 + 0.4 * scatter(&mut rng)) * (hi - lo).min(2.0);
            }

            let mut grad = DVector::zeros(n);
            problem.objective(&x, Some(&mut grad));
            let mut jac = DMatrix::zeros(m, n);
            problem.jacobian(&x, &mut jac);

            let mut xp = x.clone();
            let mut cp = DVector::zeros(m);
            let mut cm = DVector::zeros(m);
            for i in 0..n {
                let h = 1e-6 * 1f64.max(x[i].abs());
                xp[i] = x[i] + h;
                let fp = problem.objective(&xp, None);
                problem.constraints(&xp, &mut cp);
                xp[i] = x[i] - h;
                let fm = problem.objective(&xp, None);
                problem.constraints(&xp, &mut cm);
                xp[i] = x[i];

                audit.worst_gradient =
                    audit.worst_gradient.max(scale((fp - fm) / (2.0 * h), grad[i]));
                for r in 0..m {
                    audit.worst_jacobian = audit
                        .worst_jacobian
                        .max(scale((cp[r] - cm[r]) / (2.0 * h), jac[(r, i)]));
                }
            }
            audit.points += 1;
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use crate::grid::{decouple, Bounds, CostCurve, Network, TieLine};

    use super::*;

    fn lone_prosumer(p_min: f64, p_max: f64) -> Network {
        Network::new(
            vec![Prosumer {
                id: "solo".into(),
                cost: CostCurve::new(0.05, 2.0, 0.0),
                p_bounds: Bounds::new(p_min, p_max),
                q_bounds: Bounds::new(-50.0, 50.0),
                v_bounds: Bounds::new(0.95, 1.05),
                load_p: 20.0,
                load_q: 5.0,
                is_slack: true,
            }],
            vec![],
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn neighborless_prosumer_balances_its_own_load() {
        let net = lone_prosumer(0.0, 100.0);
        let dec = decouple(&net);
        let owner = net.prosumer(&"solo".into()).unwrap();
        let state = LocalState::flat(owner, &dec, 10.0);
        let solved = local_solve(
            &state,
            owner,
            &dec,
            &BTreeMap::new(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(solved.p_mw(), 20.0, epsilon = 1e-4);
        assert_relative_eq!(solved.q_mvar(), 5.0, epsilon = 1e-4);
        assert_relative_eq!(solved.cost, 0.05 * 400.0 + 2.0 * 20.0, epsilon = 1e-3);
    }

    #[test]
    fn bounds_excluding_load_are_infeasible() {
        let net = lone_prosumer(0.0, 10.0);
        let dec = decouple(&net);
        let owner = net.prosumer(&"solo".into()).unwrap();
        let state = LocalState::flat(owner, &dec, 10.0);
        let err = local_solve(
            &state,
            owner,
            &dec,
            &BTreeMap::new(),
            &SolverOptions::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("infeasible"), "{msg}");
    }

    fn star_fixture() -> (Network, ProsumerId) {
        let mk = |id: &str, slack: bool| Prosumer {
            id: id.into(),
            cost: CostCurve::new(0.02, 3.0, 1.0),
            p_bounds: Bounds::new(0.0, 80.0),
            q_bounds: Bounds::new(-40.0, 40.0),
            v_bounds: Bounds::new(0.95, 1.05),
            load_p: if slack { 0.0 } else { 15.0 },
            load_q: 2.0,
            is_slack: slack,
        };
        let net = Network::new(
            vec![mk("hub", true), mk("e1", false), mk("e2", false)],
            vec![
                TieLine::new("hub".into(), "e1".into(), Admittance::new(2.0, -8.0)),
                TieLine::new("hub".into(), "e2".into(), Admittance::new(1.5, -6.0)),
            ],
            100.0,
        )
        .unwrap();
        (net, "hub".into())
    }

    fn fd_jacobian(p: &StarProblem, x: &DVector<f64>) -> DMatrix<f64> {
        let m = p.num_eq();
        let n = p.dim();
        let mut out = DMatrix::zeros(m, n);
        let mut cp = DVector::zeros(m);
        let mut cm = DVector::zeros(m);
        let mut xp = x.clone();
        for i in 0..n {
            let h = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            p.constraints(&xp, &mut cp);
            xp[i] = x[i] - h;
            p.constraints(&xp, &mut cm);
            xp[i] = x[i];
            for r in 0..m {
                out[(r, i)] = (cp[r] - cm[r]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let (net, hub) = star_fixture();
        let dec = decouple(&net);
        let owner = net.prosumer(&hub).unwrap();
        let lambda: BTreeMap<ProsumerId, f64> =
            [("e1".into(), 10.0), ("e2".into(), 10.0)].into();
        let mut targets = MidpointTargets::new();
        targets.insert(
            "e1".into(),
            BusState {
                v_pu: 0.99,
                delta_rad: -0.02,
                p_pu: 0.12,
                q_pu: 0.03,
            },
        );
        targets.insert(
            "e2".into(),
            BusState {
                v_pu: 1.01,
                delta_rad: 0.015,
                p_pu: -0.08,
                q_pu: -0.01,
            },
        );
        let p = StarProblem::new(owner, &dec, &lambda, &targets).unwrap();
        // An off-nominal interior point exercises every trig term.
        let mut x = DVector::zeros(p.dim());
        let vals = [1.02, 0.03, 0.25, 0.05, 0.98, -0.04, 0.11, 0.02, 1.03, 0.06, -0.09, 0.04];
        for (i, v) in vals.iter().enumerate() {
            x[i] = *v;
        }
        let mut analytic = DMatrix::zeros(p.num_eq(), p.dim());
        p.jacobian(&x, &mut analytic);
        let fd = fd_jacobian(&p, &x);
        for r in 0..p.num_eq() {
            for c in 0..p.dim() {
                let scale = 1.0 + analytic[(r, c)].abs();
                assert!(
                    (analytic[(r, c)] - fd[(r, c)]).abs() <= 1e-5 * scale,
                    "jacobian mismatch at ({r},{c}): {} vs {}",
                    analytic[(r, c)],
                    fd[(r, c)]
                );
            }
        }
    }

    #[test]
    fn hub_solve_respects_power_flow_and_bounds() {
        let (net, hub) = star_fixture();
        let dec = decouple(&net);
        let owner = net.prosumer(&hub).unwrap();
        let mut state = LocalState::flat(owner, &dec, 10.0);
        state.lambda = [("e1".into(), 8.0), ("e2".into(), 8.0)].into();
        let mut targets = MidpointTargets::new();
        targets.insert(
            "e1".into(),
            BusState {
                v_pu: 1.0,
                delta_rad: -0.01,
                p_pu: -0.10,
                q_pu: 0.0,
            },
        );
        targets.insert(
            "e2".into(),
            BusState {
                v_pu: 1.0,
                delta_rad: -0.008,
                p_pu: -0.08,
                q_pu: 0.0,
            },
        );
        let solved = local_solve(&state, owner, &dec, &targets, &SolverOptions::default()).unwrap();

        let problem = StarProblem::new(owner, &dec, &state.lambda, &targets).unwrap();
        let x = problem.initial_point(&solved);
        let mut c = DVector::zeros(problem.num_eq());
        problem.constraints(&x, &mut c);
        // Power-flow rows only; split rows were rebuilt exactly.
        for r in 0..2 + 2 * problem.degree() {
            assert!(c[r].abs() <= 1e-8, "pf residual {r}: {}", c[r]);
        }
        for i in 0..problem.dim() {
            assert!(
                x[i] >= problem.lower()[i] - 1e-6 && x[i] <= problem.upper()[i] + 1e-6,
                "bound violated at {i}"
            );
        }
        // The hub is the slack: pinned at V = 1, angle 0.
        assert_relative_eq!(solved.center.v_pu, 1.0, epsilon = 1e-12);
        assert_relative_eq!(solved.center.delta_rad, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn derivative_audit_agrees_with_finite_differences() {
        let dec = decouple(&crate::fixtures::five_bus());
        let audit = audit_derivatives(&dec, 3, 7).unwrap();
        assert_eq!(audit.points, 15);
        assert!(
            audit.worst_gradient < 1e-7,
            "gradient off by {}",
            audit.worst_gradient
        );
        assert!(
            audit.worst_jacobian < 1e-7,
            "jacobian off by {}",
            audit.worst_jacobian
        );
    }
}
