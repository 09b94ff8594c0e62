//! Derivative workspace and the coupled consensus step.
//!
//! After every round of local solves the per-prosumer gradients, Hessians
//! and power-flow Jacobians are assembled into a [`SolverWorkspace`]. The
//! consensus step then solves one equality-constrained QP over all
//! physical variables: minimize the blockwise quadratic model subject to
//! linearized power flow, exact linearized midpoint agreement, and frozen
//! active bounds. Its multipliers provide the next consensus prices.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::grid::{DecoupledNetwork, ProsumerId};

use super::local::{LocalState, StarProblem};
use super::nlp::BoxNlp;
use super::{DopfError, RegPolicy};

/// Index bookkeeping for the stacked physical variable vector. Blocks are
/// laid out in prosumer id order; within a block the order is
/// `[Vc dc Pc Qc]` then `[Vb db Pb Qb]` per neighbor in id order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub ids: Vec<ProsumerId>,
    pub offsets: Vec<usize>,
    pub dims: Vec<usize>,
    pub neighbor_orders: Vec<Vec<ProsumerId>>,
    pub total: usize,
}

impl Layout {
    pub fn of(dec: &DecoupledNetwork) -> Layout {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut dims = Vec::new();
        let mut neighbor_orders = Vec::new();
        let mut total = 0usize;
        for id in dec.base().ids() {
            let neighbors: Vec<ProsumerId> = dec.attachments_of(id).into_keys().collect();
            let dim = 4 + 4 * neighbors.len();
            ids.push(id.clone());
            offsets.push(total);
            dims.push(dim);
            neighbor_orders.push(neighbors);
            total += dim;
        }
        Layout {
            ids,
            offsets,
            dims,
            neighbor_orders,
            total,
        }
    }

    pub fn block_of(&self, id: &ProsumerId) -> usize {
        self.ids.binary_search(id).expect("id in layout")
    }

    /// Global index of the first coordinate (V) of `owner`'s auxiliary bus
    /// toward `far`.
    pub fn aux_base(&self, owner: &ProsumerId, far: &ProsumerId) -> usize {
        let b = self.block_of(owner);
        let k = self.neighbor_orders[b]
            .iter()
            .position(|n| n == far)
            .expect("far side in neighbor order");
        self.offsets[b] + 4 + 4 * k
    }

    /// Assembles the stacked physical vector from the local states.
    pub fn gather(&self, states: &BTreeMap<ProsumerId, LocalState>) -> DVector<f64> {
        let mut x = DVector::zeros(self.total);
        for (b, id) in self.ids.iter().enumerate() {
            let st = &states[id];
            let o = self.offsets[b];
            x[o] = st.center.v_pu;
            x[o + 1] = st.center.delta_rad;
            x[o + 2] = st.center.p_pu;
            x[o + 3] = st.center.q_pu;
            for (k, far) in self.neighbor_orders[b].iter().enumerate() {
                let bus = st.aux[far];
                let a = o + 4 + 4 * k;
                x[a] = bus.v_pu;
                x[a + 1] = bus.delta_rad;
                x[a + 2] = bus.p_pu;
                x[a + 3] = bus.q_pu;
            }
        }
        x
    }

    /// Writes the stacked physical vector back into the states.
    pub fn scatter(&self, x: &DVector<f64>, states: &mut BTreeMap<ProsumerId, LocalState>) {
        for (b, id) in self.ids.iter().enumerate() {
            let st = states.get_mut(id).expect("state for id");
            let o = self.offsets[b];
            st.center.v_pu = x[o];
            st.center.delta_rad = x[o + 1];
            st.center.p_pu = x[o + 2];
            st.center.q_pu = x[o + 3];
            for (k, far) in self.neighbor_orders[b].iter().enumerate() {
                let a = o + 4 + 4 * k;
                let bus = st.aux.get_mut(far).expect("aux entry");
                bus.v_pu = x[a];
                bus.delta_rad = x[a + 1];
                bus.p_pu = x[a + 2];
                bus.q_pu = x[a + 3];
            }
        }
    }
}

/// Per-prosumer derivatives in physical coordinates.
#[derive(Debug, Clone)]
pub struct BlockDerivatives {
    /// Objective gradient; entry 2 is the marginal production cost.
    pub gradient: DVector<f64>,
    /// Lagrangian Hessian (objective plus power-flow curvature weighted
    /// by the local multipliers). Symmetric; regularized later.
    pub hessian: DMatrix<f64>,
    /// Power-flow Jacobian, `(2 + 2 deg) x (4 + 4 deg)`.
    pub jacobian: DMatrix<f64>,
    /// Power-flow residuals at the local solution.
    pub residual: DVector<f64>,
    /// Physical bounds, for active-set detection and merit evaluation.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Variables held fixed in the consensus step (at a bound).
    pub active: Vec<bool>,
}

/// Stacked derivative workspace for one consensus iteration.
#[derive(Debug, Clone)]
pub struct SolverWorkspace {
    pub blocks: BTreeMap<ProsumerId, BlockDerivatives>,
    pub iteration: usize,
    pub step_length: f64,
    pub(crate) layout: Layout,
}

const ACTIVE_EPS: f64 = 1e-8;
/// Minimum reduced-gradient magnitude treated as a strongly active bound.
const STRONG_ACTIVE: f64 = 1e-6;

/// Builds gradients, Hessians and Jacobians for every prosumer at its
/// current local solution.
pub fn build_derivatives(
    states: &BTreeMap<ProsumerId, LocalState>,
    dec: &DecoupledNetwork,
    iteration: usize,
) -> Result<SolverWorkspace, DopfError> {
    let layout = Layout::of(dec);
    let mut blocks = BTreeMap::new();
    for id in &layout.ids {
        let owner = dec.base().prosumer(id).expect("prosumer in network");
        let state = &states[id];
        let problem = StarProblem::physical(owner, dec)?;
        let nv = 4 + 4 * problem.degree();
        let x = problem.initial_point(state);

        let mut grad_full = DVector::zeros(problem.dim());
        problem.objective(&x, Some(&mut grad_full));
        let gradient = DVector::from_iterator(nv, (0..nv).map(|i| grad_full[i]));

        let n_pf = 2 + 2 * problem.degree();
        let mut c_full = DVector::zeros(problem.num_eq());
        problem.constraints(&x, &mut c_full);
        let residual = DVector::from_iterator(n_pf, (0..n_pf).map(|i| c_full[i]));

        let mut jac_full = DMatrix::zeros(problem.num_eq(), problem.dim());
        problem.jacobian(&x, &mut jac_full);
        let jacobian = jac_full.view((0, 0), (n_pf, nv)).into_owned();

        // Lagrangian Hessian with the local power-flow multipliers as
        // curvature weights; split rows are linear and contribute nothing.
        let mut sigma = DVector::zeros(problem.num_eq());
        for (i, d) in state.pf_duals.iter().enumerate().take(n_pf) {
            sigma[i] = *d;
        }
        let mut hess_full = DMatrix::zeros(problem.dim(), problem.dim());
        problem.lagrangian_hessian(&x, &sigma, &mut hess_full);
        let hessian = hess_full.view((0, 0), (nv, nv)).into_owned();

        for v in gradient.iter().chain(hessian.iter()).chain(jacobian.iter()) {
            if !v.is_finite() {
                return Err(DopfError::LocalSolveFailed {
                    id: id.clone(),
                    reason: "non-finite derivative entry".into(),
                });
            }
        }

        let lower = problem.lower()[..nv].to_vec();
        let upper = problem.upper()[..nv].to_vec();
        // Freeze a bound only when its multiplier sign confirms it: the
        // reduced Lagrangian gradient must push outward. A variable merely
        // parked at a bound (zero multiplier) stays free, otherwise the
        // consensus step cannot trade through it.
        let sigma_pf = sigma.rows(0, n_pf).into_owned();
        let reduced = &gradient + jacobian.transpose() * &sigma_pf;
        let active = (0..nv)
            .map(|i| {
                let fixed = upper[i] - lower[i] <= ACTIVE_EPS;
                let at_lo = x[i] <= lower[i] + ACTIVE_EPS;
                let at_hi = x[i] >= upper[i] - ACTIVE_EPS;
                fixed
                    || (at_lo && reduced[i] > STRONG_ACTIVE)
                    || (at_hi && reduced[i] < -STRONG_ACTIVE)
            })
            .collect();

        blocks.insert(
            id.clone(),
            BlockDerivatives {
                gradient,
                hessian,
                jacobian,
                residual,
                lower,
                upper,
                active,
            },
        );
    }
    Ok(SolverWorkspace {
        blocks,
        iteration,
        step_length: 1.0,
        layout,
    })
}

/// Result of one consensus QP solve.
#[derive(Debug, Clone)]
pub(crate) struct ConsensusStep {
    /// Step over the stacked physical variables.
    pub delta: DVector<f64>,
    /// Coupling-row multipliers per pair, component order
    /// (delta, V, P, Q).
    pub pair_duals: BTreeMap<(ProsumerId, ProsumerId), [f64; 4]>,
    /// Decrease of the penalized quadratic model, >= 0.
    pub model_decrease: f64,
    /// Merit penalty weight consistent with the duals.
    pub rho: f64,
}

/// Solves the equality-constrained consensus QP.
///
/// Constraint rows: linearized power flow per prosumer, four agreement
/// rows per auxiliary pair, and a freeze row for every active bound. The
/// step satisfies all of them exactly (up to factorization roundoff).
pub(crate) fn consensus_step(
    ws: &SolverWorkspace,
    states: &BTreeMap<ProsumerId, LocalState>,
    dec: &DecoupledNetwork,
    rho_in: f64,
    policy: RegPolicy,
) -> Result<ConsensusStep, DopfError> {
    let layout = &ws.layout;
    let n = layout.total;

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();

    for (b, id) in layout.ids.iter().enumerate() {
        let blk = &ws.blocks[id];
        let o = layout.offsets[b];
        let dim = layout.dims[b];
        for i in 0..dim {
            g[o + i] = blk.gradient[i];
            for j in 0..dim {
                h[(o + i, o + j)] = blk.hessian[(i, j)];
            }
        }
        for r in 0..blk.jacobian.nrows() {
            let coeffs = (0..dim)
                .filter(|&c| blk.jacobian[(r, c)] != 0.0)
                .map(|c| (o + c, blk.jacobian[(r, c)]))
                .collect();
            rows.push((coeffs, -blk.residual[r]));
        }
        for (i, &active) in blk.active.iter().enumerate() {
            if active {
                rows.push((vec![(o + i, 1.0)], 0.0));
            }
        }
    }

    // Agreement rows: midpoint copies equal, powers cancel.
    for pair in dec.pairs() {
        let ai = layout.aux_base(&pair.i, &pair.j);
        let aj = layout.aux_base(&pair.j, &pair.i);
        let si = &states[&pair.i].aux[&pair.j];
        let sj = &states[&pair.j].aux[&pair.i];
        rows.push((
            vec![(ai + 1, 1.0), (aj + 1, -1.0)],
            -(si.delta_rad - sj.delta_rad),
        ));
        rows.push((vec![(ai, 1.0), (aj, -1.0)], -(si.v_pu - sj.v_pu)));
        rows.push((vec![(ai + 2, 1.0), (aj + 2, 1.0)], -(si.p_pu + sj.p_pu)));
        rows.push((vec![(ai + 3, 1.0), (aj + 3, 1.0)], -(si.q_pu + sj.q_pu)));
    }

    let m = rows.len();
    let mut e_mat = DMatrix::zeros(m, n);
    let mut e_rhs = DVector::zeros(m);
    for (r, (coeffs, rhs)) in rows.iter().enumerate() {
        for (c, v) in coeffs {
            e_mat[(r, *c)] = *v;
        }
        e_rhs[r] = *rhs;
    }

    // Minimum-norm particular solution and null-space basis.
    let svd = e_mat.clone().svd(true, true);
    let pinv = svd
        .pseudo_inverse(1e-10)
        .map_err(|_| DopfError::SingularConsensus {
            iteration: ws.iteration,
            condition: f64::INFINITY,
        })?;
    let delta_p = &pinv * &e_rhs;

    let gram = SymmetricEigen::new(e_mat.transpose() * &e_mat);
    let max_eig = gram.eigenvalues.amax().max(1.0);
    let null_cols: Vec<usize> = (0..n)
        .filter(|&i| gram.eigenvalues[i] <= 1e-12 * max_eig)
        .collect();
    let nz = null_cols.len();

    let delta = if nz == 0 {
        delta_p.clone()
    } else {
        let mut z = DMatrix::zeros(n, nz);
        for (c, &i) in null_cols.iter().enumerate() {
            z.set_column(c, &gram.eigenvectors.column(i));
        }
        let hz0 = z.transpose() * &h * &z;
        let rz = z.transpose() * (&g + &h * &delta_p);
        let scale = 1.0 + (0..nz).map(|i| hz0[(i, i)].abs()).fold(0.0, f64::max);
        let mut sigma = 0.0f64;
        let chol = loop {
            let mut hz = hz0.clone();
            if sigma > 0.0 {
                for i in 0..nz {
                    hz[(i, i)] += sigma;
                }
            }
            match Cholesky::new(hz) {
                Some(c) => break c,
                None => {
                    if policy == RegPolicy::None {
                        let eig = SymmetricEigen::new(hz0.clone());
                        let max_e = eig.eigenvalues.amax();
                        let min_e = eig
                            .eigenvalues
                            .iter()
                            .cloned()
                            .fold(f64::INFINITY, f64::min);
                        return Err(DopfError::SingularConsensus {
                            iteration: ws.iteration,
                            condition: if min_e.abs() > 0.0 {
                                max_e / min_e.abs()
                            } else {
                                f64::INFINITY
                            },
                        });
                    }
                    sigma = if sigma == 0.0 { 1e-8 * scale } else { sigma * 100.0 };
                    if sigma > 1e16 * scale {
                        return Err(DopfError::SingularConsensus {
                            iteration: ws.iteration,
                            condition: f64::INFINITY,
                        });
                    }
                }
            }
        };
        let w = chol.solve(&(-rz));
        &delta_p + z * w
    };

    // Multiplier estimates from stationarity: E' nu = H delta + g.
    let stat = &h * &delta + &g;
    let nu = pinv.transpose() * &stat;

    let mut pair_duals = BTreeMap::new();
    // Coupling rows were appended after all block rows, 4 per pair.
    let first_pair_row = m - 4 * dec.pairs().len();
    for (p, pair) in dec.pairs().iter().enumerate() {
        let r = first_pair_row + 4 * p;
        pair_duals.insert(
            (pair.i.clone(), pair.j.clone()),
            [nu[r], nu[r + 1], nu[r + 2], nu[r + 3]],
        );
    }

    // Penalized model decrease: rho * |rhs|_1 - (g'd + d'Hd/2) must be
    // nonnegative; raise rho when the restoration part dominates.
    let viol0: f64 = e_rhs.iter().map(|v| v.abs()).sum();
    let model_obj = g.dot(&delta) + 0.5 * (&h * &delta).dot(&delta);
    let dual_floor = 1.5 * nu.amax();
    let mut rho = rho_in.max(dual_floor).max(1.0);
    if viol0 > 1e-14 && rho * viol0 - model_obj < 0.0 {
        rho = 1.5 * model_obj / viol0;
    }
    let model_decrease = (rho * viol0 - model_obj).max(0.0);

    Ok(ConsensusStep {
        delta,
        pair_duals,
        model_decrease,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use crate::dopf::local::local_solve;
    use crate::dopf::SolverOptions;
    use crate::fixtures;
    use crate::grid::decouple;

    use super::*;

    fn solved_two_node() -> (
        crate::grid::Network,
        DecoupledNetwork,
        BTreeMap<ProsumerId, LocalState>,
    ) {
        let net = fixtures::two_node();
        let dec = decouple(&net);
        let opts = SolverOptions::default();
        let mut states = BTreeMap::new();
        for p in net.prosumers() {
            states.insert(p.id.clone(), LocalState::flat(p, &dec, opts.lambda_init));
        }
        // One round of local solves against flat midpoints.
        let snapshot = states.clone();
        for p in net.prosumers() {
            let mut targets = BTreeMap::new();
            for far in dec.attachments_of(&p.id).keys() {
                targets.insert(far.clone(), snapshot[far].aux[&p.id]);
            }
            let solved = local_solve(&snapshot[&p.id], p, &dec, &targets, &opts).unwrap();
            states.insert(p.id.clone(), solved);
        }
        (net, dec, states)
    }

    #[test]
    fn workspace_has_expected_shapes() {
        let (_net, dec, states) = solved_two_node();
        let ws = build_derivatives(&states, &dec, 0).unwrap();
        assert_eq!(ws.layout.total, 16);
        for blk in ws.blocks.values() {
            assert_eq!(blk.gradient.len(), 8);
            assert_eq!(blk.hessian.nrows(), 8);
            assert_eq!(blk.jacobian.shape(), (4, 8));
            // Symmetry of the Hessian approximation.
            for i in 0..8 {
                for j in 0..8 {
                    assert_relative_eq!(
                        blk.hessian[(i, j)],
                        blk.hessian[(j, i)],
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn marginal_cost_lands_in_gradient() {
        let (net, dec, states) = solved_two_node();
        let ws = build_derivatives(&states, &dec, 0).unwrap();
        for (id, blk) in &ws.blocks {
            let p = net.prosumer(id).unwrap();
            let expected = p.cost.marginal(states[id].p_mw());
            assert_relative_eq!(blk.gradient[2], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn consensus_fixed_point_gives_zero_step() {
        // Hand-built consensus state on the two-node net: no cost
        // gradient, no residuals, agreeing midpoints => zero step.
        let net = fixtures::two_node();
        let dec = decouple(&net);
        let mut states = BTreeMap::new();
        for p in net.prosumers() {
            states.insert(p.id.clone(), LocalState::flat(p, &dec, 10.0));
        }
        let layout = Layout::of(&dec);
        let mut blocks = BTreeMap::new();
        for id in &layout.ids {
            let b = layout.block_of(id);
            let dim = layout.dims[b];
            blocks.insert(
                id.clone(),
                BlockDerivatives {
                    gradient: DVector::zeros(dim),
                    hessian: DMatrix::identity(dim, dim),
                    jacobian: DMatrix::zeros(4, dim),
                    residual: DVector::zeros(4),
                    lower: vec![-10.0; dim],
                    upper: vec![10.0; dim],
                    active: vec![false; dim],
                },
            );
        }
        let ws = SolverWorkspace {
            blocks,
            iteration: 0,
            step_length: 1.0,
            layout,
        };
        let step = consensus_step(&ws, &states, &dec, 1.0, RegPolicy::Adaptive).unwrap();
        assert!(step.delta.amax() <= 1e-9, "step should vanish");
        assert!(step.model_decrease >= 0.0);
    }

    #[test]
    fn rank_deficient_hessian_errors_without_regularization() {
        let (_net, dec, states) = solved_two_node();
        let mut ws = build_derivatives(&states, &dec, 3).unwrap();
        for blk in ws.blocks.values_mut() {
            blk.hessian.fill(0.0);
        }
        let err = consensus_step(&ws, &states, &dec, 1.0, RegPolicy::None).unwrap_err();
        match err {
            DopfError::SingularConsensus { iteration, .. } => assert_eq!(iteration, 3),
            other => panic!("unexpected error {other:?}"),
        }
        // The adaptive policy shifts instead.
        assert!(consensus_step(&ws, &states, &dec, 1.0, RegPolicy::Adaptive).is_ok());
    }

    #[test]
    fn step_satisfies_agreement_rows() {
        let (_net, dec, states) = solved_two_node();
        let ws = build_derivatives(&states, &dec, 0).unwrap();
        let step = consensus_step(&ws, &states, &dec, 1.0, RegPolicy::Adaptive).unwrap();
        let layout = &ws.layout;
        let x = layout.gather(&states);
        let xn = &x + &step.delta;
        for pair in dec.pairs() {
            let ai = layout.aux_base(&pair.i, &pair.j);
            let aj = layout.aux_base(&pair.j, &pair.i);
            assert_relative_eq!(xn[ai], xn[aj], epsilon = 1e-8);
            assert_relative_eq!(xn[ai + 1], xn[aj + 1], epsilon = 1e-8);
            assert_relative_eq!(xn[ai + 2], -xn[aj + 2], epsilon = 1e-8);
            assert_relative_eq!(xn[ai + 3], -xn[aj + 3], epsilon = 1e-8);
        }
    }
}
