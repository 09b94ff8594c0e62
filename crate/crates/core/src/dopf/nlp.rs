//! Small dense NLP solver: minimize f(x) subject to c(x) = 0 and box
//! bounds, via an augmented Lagrangian outer loop with a projected Newton
//! inner loop.
//!
//! Built for the star-shaped local subproblems, which have tens of
//! variables; everything is dense nalgebra. Fixed variables are expressed
//! as equal lower and upper bounds.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Problem callbacks. All slices are sized by `dim()` / `num_eq()`.
pub trait BoxNlp {
    fn dim(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// Objective value; fills the gradient when asked.
    fn objective(&self, x: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64;
    /// Equality constraint residuals c(x).
    fn constraints(&self, x: &DVector<f64>, out: &mut DVector<f64>);
    /// Jacobian of c, num_eq x dim.
    fn jacobian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>);
    /// Hessian of f(x) + sigma' c(x), dim x dim, symmetric.
    fn lagrangian_hessian(&self, x: &DVector<f64>, sigma: &DVector<f64>, out: &mut DMatrix<f64>);
    /// Known bound B on a row's multiplier magnitude, used to safeguard
    /// the augmented-Lagrangian updates (|nu_row| <= B at any optimum).
    /// Rows derived from L1 penalty splits have B = the penalty weight;
    /// everything else is unbounded.
    fn multiplier_bound(&self, _row: usize) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NlpOptions {
    /// Target on the equality residual infinity norm.
    pub tol_c: f64,
    /// Target on the projected gradient infinity norm.
    pub tol_g: f64,
    /// Total inner (projected Newton) iteration budget.
    pub max_inner: usize,
    /// Cap on augmented Lagrangian outer rounds.
    pub max_outer: usize,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            tol_c: 1e-8,
            tol_g: 1e-6,
            max_inner: 200,
            max_outer: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NlpResult {
    pub x: DVector<f64>,
    /// Equality multiplier estimates (same sign convention as
    /// `lagrangian_hessian`'s sigma: gradient of f + sigma'c vanishes).
    pub multipliers: DVector<f64>,
    // Diagnostics; read by tests only.
    #[allow(dead_code)]
    pub inner_iterations: usize,
    /// Final equality residual infinity norm.
    #[allow(dead_code)]
    pub residual: f64,
}

/// Why a solve stopped short. `residual` is the last constraint infinity
/// norm; `stalled` distinguishes an apparently infeasible problem (the
/// penalty maxed out with the residual stuck) from a plain budget stop.
#[derive(Debug, Clone)]
pub struct NlpFailure {
    pub residual: f64,
    pub projected_gradient: f64,
    pub inner_iterations: usize,
    pub stalled: bool,
}

impl std::fmt::Display for NlpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.stalled {
            write!(
                f,
                "infeasible: equality residual stuck at {:.3e} with penalty maxed out",
                self.residual
            )
        } else {
            write!(
                f,
                "did not converge within {} inner iterations (residual {:.3e}, projected gradient {:.3e})",
                self.inner_iterations, self.residual, self.projected_gradient
            )
        }
    }
}

const MU_INIT: f64 = 10.0;
const MU_MAX: f64 = 1e12;

pub fn solve_box_nlp(
    p: &impl BoxNlp,
    x0: &DVector<f64>,
    warm_nu: Option<&DVector<f64>>,
    opts: &NlpOptions,
) -> Result<NlpResult, NlpFailure> {
    let m = p.num_eq();
    let mut x = clamp_to_bounds(x0, p.lower(), p.upper());
    let mut nu = warm_nu
        .filter(|v| v.len() == m)
        .cloned()
        .unwrap_or_else(|| DVector::zeros(m));
    let mut mu = MU_INIT;
    let mut c = DVector::zeros(m);
    let mut inner_used = 0usize;
    let mut prev_cnorm = f64::INFINITY;
    let tol_inner_final = opts.tol_g.min(1e-8);
    // Loose-to-tight inner tolerance: early outers only need a rough
    // stationary point, the multiplier updates do the real work.
    let mut omega = 1e-2f64;

    for _outer in 0..opts.max_outer {
        let budget = opts.max_inner.saturating_sub(inner_used);
        if budget == 0 {
            break;
        }
        let al = AugmentedProblem { p, nu: &nu, mu };
        inner_used += project_newton(&al, &mut x, omega.max(tol_inner_final), budget);
        omega *= 0.1;

        p.constraints(&x, &mut c);
        let cnorm = c.amax();
        let nu_hat = clamped_estimate(p, &nu, &c, mu);
        let mut pg = projected_lagrangian_gradient(p, &x, &nu_hat);
        if cnorm <= opts.tol_c {
            if pg <= opts.tol_g {
                return Ok(NlpResult {
                    x,
                    multipliers: nu_hat,
                    inner_iterations: inner_used,
                    residual: cnorm,
                });
            }
            // The point may be float-optimal with only the multiplier
            // estimate lagging; a least-squares fit gives the honest
            // stationarity certificate independent of the penalty level.
            let (nu_ls, pg_ls) = ls_certificate(p, &x);
            if pg_ls <= opts.tol_g {
                return Ok(NlpResult {
                    x,
                    multipliers: nu_ls,
                    inner_iterations: inner_used,
                    residual: cnorm,
                });
            }
            pg = pg.min(pg_ls);
        }
        if m == 0 {
            // Pure bound-constrained problem: only the gradient matters.
            if pg <= opts.tol_g {
                return Ok(NlpResult {
                    x,
                    multipliers: nu_hat,
                    inner_iterations: inner_used,
                    residual: 0.0,
                });
            }
            continue;
        }
        // March the multipliers while the residual carries real signal;
        // below that the update is float noise amplified by mu.
        if cnorm > 1e-13 {
            nu = nu_hat;
        }
        if cnorm <= opts.tol_c {
            // Feasible: cool the penalty so the inner loop polishes
            // stationarity at decent conditioning.
            mu = (mu / 10.0).max(MU_INIT);
        } else {
            if cnorm > 0.25 * prev_cnorm {
                mu = (mu * 10.0).min(MU_MAX);
            }
            prev_cnorm = cnorm;
        }
    }

    p.constraints(&x, &mut c);
    let cnorm = c.amax();
    let nu_hat = clamped_estimate(p, &nu, &c, mu);
    let mut pg = projected_lagrangian_gradient(p, &x, &nu_hat);
    let mut best_nu = nu_hat;
    if cnorm <= opts.tol_c.max(1e-8) {
        let (nu_ls, pg_ls) = ls_certificate(p, &x);
        if pg_ls < pg {
            pg = pg_ls;
            best_nu = nu_ls;
        }
    }
    let stalled = mu >= MU_MAX && cnorm > 1e-6;
    if cnorm <= opts.tol_c.max(1e-8) && pg <= opts.tol_g.max(1e-6) {
        // Close enough for the stated contracts even though the inner
        // targets were not reached.
        return Ok(NlpResult {
            x,
            multipliers: best_nu,
            inner_iterations: inner_used,
            residual: cnorm,
        });
    }
    Err(NlpFailure {
        residual: cnorm,
        projected_gradient: pg,
        inner_iterations: inner_used,
        stalled,
    })
}

/// First-order multiplier estimate nu + mu c, clamped row-wise to the
/// problem's known multiplier bounds.
fn clamped_estimate(
    p: &impl BoxNlp,
    nu: &DVector<f64>,
    c: &DVector<f64>,
    mu: f64,
) -> DVector<f64> {
    let mut nh = nu + c * mu;
    for r in 0..nh.len() {
        let b = p.multiplier_bound(r);
        nh[r] = nh[r].clamp(-b, b);
    }
    nh
}

/// Least-squares multiplier fit at x: minimizes |grad f + J' nu| over the
/// strictly interior coordinates, honoring the per-row multiplier bounds.
/// Returns the fit and the projected Lagrangian gradient it certifies.
fn ls_certificate(p: &impl BoxNlp, x: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = p.dim();
    let m = p.num_eq();
    let l = p.lower();
    let u = p.upper();
    let mut g = DVector::zeros(n);
    p.objective(x, Some(&mut g));
    if m == 0 {
        return (
            DVector::zeros(0),
            projected_gradient_norm(&g, x, l, u),
        );
    }
    let mut jac = DMatrix::zeros(m, n);
    p.jacobian(x, &mut jac);

    // Fit only where the gradient must actually vanish.
    let cols: Vec<usize> = (0..n)
        .filter(|&i| {
            u[i] - l[i] > BOUND_EPS && x[i] > l[i] + BOUND_EPS && x[i] < u[i] - BOUND_EPS
        })
        .collect();
    let a = DMatrix::from_fn(cols.len(), m, |r, cm| jac[(cm, cols[r])]);
    let gc = DVector::from_iterator(cols.len(), cols.iter().map(|&i| g[i]));
    let mut nu = match a.clone().svd(true, true).pseudo_inverse(1e-12) {
        Ok(pinv) => pinv * (-&gc),
        Err(_) => DVector::zeros(m),
    };

    let mut clamped = false;
    for r in 0..m {
        let b = p.multiplier_bound(r);
        let v = nu[r].clamp(-b, b);
        if v != nu[r] {
            clamped = true;
            nu[r] = v;
        }
    }
    if clamped {
        // Refit the unbounded rows around the clamped contribution.
        let free_rows: Vec<usize> = (0..m)
            .filter(|&r| p.multiplier_bound(r).is_infinite())
            .collect();
        if !free_rows.is_empty() {
            let mut rhs = gc.clone();
            for r in 0..m {
                if p.multiplier_bound(r).is_finite() {
                    for (k, &i) in cols.iter().enumerate() {
                        rhs[k] += jac[(r, i)] * nu[r];
                    }
                }
            }
            let af = DMatrix::from_fn(cols.len(), free_rows.len(), |rr, cc| {
                jac[(free_rows[cc], cols[rr])]
            });
            if let Ok(pinv) = af.clone().svd(true, true).pseudo_inverse(1e-12) {
                let nf = pinv * (-&rhs);
                for (k, &r) in free_rows.iter().enumerate() {
                    nu[r] = nf[k];
                }
            }
        }
    }

    let grad_l = &g + jac.transpose() * &nu;
    let pg = projected_gradient_norm(&grad_l, x, l, u);
    (nu, pg)
}

/// Augmented Lagrangian of the underlying problem:
/// f(x) + nu'c(x) + (mu/2)|c(x)|^2, same box bounds, no equalities.
struct AugmentedProblem<'a, P: BoxNlp> {
    p: &'a P,
    nu: &'a DVector<f64>,
    mu: f64,
}

impl<P: BoxNlp> AugmentedProblem<'_, P> {
    fn value_grad(&self, x: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64 {
        let m = self.p.num_eq();
        let mut c = DVector::zeros(m);
        self.p.constraints(x, &mut c);
        match grad {
            None => {
                let f = self.p.objective(x, None);
                f + self.nu.dot(&c) + 0.5 * self.mu * c.norm_squared()
            }
            Some(g) => {
                let f = self.p.objective(x, Some(g));
                let mut jac = DMatrix::zeros(m, self.p.dim());
                self.p.jacobian(x, &mut jac);
                let sigma = self.nu + &c * self.mu;
                *g += jac.transpose() * &sigma;
                f + self.nu.dot(&c) + 0.5 * self.mu * c.norm_squared()
            }
        }
    }

    fn hessian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        let m = self.p.num_eq();
        let n = self.p.dim();
        let mut c = DVector::zeros(m);
        self.p.constraints(x, &mut c);
        let sigma = self.nu + &c * self.mu;
        self.p.lagrangian_hessian(x, &sigma, out);
        let mut jac = DMatrix::zeros(m, n);
        self.p.jacobian(x, &mut jac);
        // Gauss-Newton term of the penalty.
        out.gemm_tr(self.mu, &jac, &jac, 1.0);
    }
}

fn clamp_to_bounds(x: &DVector<f64>, l: &[f64], u: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(l.iter().zip(u))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
    )
}

/// Infinity norm of the gradient of f + nu'c projected onto the feasible
/// box directions at x.
fn projected_lagrangian_gradient(p: &impl BoxNlp, x: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let n = p.dim();
    let m = p.num_eq();
    let mut g = DVector::zeros(n);
    p.objective(x, Some(&mut g));
    if m > 0 {
        let mut jac = DMatrix::zeros(m, n);
        p.jacobian(x, &mut jac);
        g += jac.transpose() * nu;
    }
    projected_gradient_norm(&g, x, p.lower(), p.upper())
}

fn projected_gradient_norm(g: &DVector<f64>, x: &DVector<f64>, l: &[f64], u: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..g.len() {
        let at_lower = x[i] <= l[i] + BOUND_EPS;
        let at_upper = x[i] >= u[i] - BOUND_EPS;
        let pg = if at_lower && at_upper {
            0.0
        } else if at_lower {
            g[i].min(0.0)
        } else if at_upper {
            g[i].max(0.0)
        } else {
            g[i]
        };
        worst = worst.max(pg.abs());
    }
    worst
}

const BOUND_EPS: f64 = 1e-9;

/// Projected Newton with backtracking on a bound-constrained smooth
/// problem. Mutates x in place; returns iterations spent.
fn project_newton<P: BoxNlp>(
    al: &AugmentedProblem<'_, P>,
    x: &mut DVector<f64>,
    tol: f64,
    budget: usize,
) -> usize {
    let n = al.p.dim();
    let l = al.p.lower();
    let u = al.p.upper();
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);

    for iter in 0..budget {
        let f0 = al.value_grad(x, Some(&mut g));
        if projected_gradient_norm(&g, x, l, u) <= tol {
            return iter;
        }
        al.hessian(x, &mut h);

        // Free set: strictly inside, or at a bound with the gradient
        // pushing inward.
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                if u[i] - l[i] <= BOUND_EPS {
                    return false;
                }
                let at_lower = x[i] <= l[i] + BOUND_EPS;
                let at_upper = x[i] >= u[i] - BOUND_EPS;
                !(at_lower && g[i] > 0.0 || at_upper && g[i] < 0.0)
            })
            .collect();
        if free.is_empty() {
            return iter;
        }

        let hf = h.select_rows(free.iter()).select_columns(free.iter());
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let df = newton_direction(&hf, &gf);

        let mut d = DVector::zeros(n);
        for (k, &i) in free.iter().enumerate() {
            d[i] = df[k];
        }
        // Cap absurd directions (near-singular curvature) so clamping
        // cannot reduce the accepted step to numerical noise.
        let dmax = d.amax();
        if dmax > 1e3 {
            d *= 1e3 / dmax;
        }

        let mut alpha = 1.0f64;
        let mut moved = false;
        while alpha >= 1e-12 {
            let cand = clamp_to_bounds(&(&*x + &d * alpha), l, u);
            let actual = &cand - &*x;
            if actual.amax() <= 1e-14 * (1.0 + x.amax()) {
                // Clamping swallowed the whole step.
                alpha *= 0.5;
                continue;
            }
            let slope = g.dot(&actual);
            if slope >= 0.0 {
                alpha *= 0.5;
                continue;
            }
            let f1 = al.value_grad(&cand, None);
            if f1 <= f0 + 1e-4 * slope {
                if f0 - f1 <= 1e-15 * (1.0 + f0.abs()) {
                    // Progress below float resolution: further inner
                    // iterations cannot help at this penalty level.
                    *x = cand;
                    return iter + 1;
                }
                *x = cand;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return iter + 1;
        }
    }
    budget
}

/// Solves (H + shift I) d = -g with the shift escalated until the
/// factorization succeeds and d is a genuine descent direction. Falls
/// back to steepest descent if no shift works.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let scale = 1.0 + (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max);
    let gnorm = g.norm();
    let mut shift = 0.0f64;
    loop {
        let mut hs = h.clone();
        if shift > 0.0 {
            for i in 0..n {
                hs[(i, i)] += shift;
            }
        }
        if let Some(chol) = Cholesky::new(hs) {
            let d = chol.solve(&(-g));
            let quality = g.dot(&d) <= -1e-8 * gnorm * d.norm();
            if quality && d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 100.0 };
        if shift > 1e10 * scale {
            return -g;
        }
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    /// min (x0-3)^2 + (x1+1)^2 with x in [0,2]x[0,2]: optimum (2, 0).
    struct BoxQuad;

    impl BoxNlp for BoxQuad {
        fn dim(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            0
        }
        fn lower(&self) -> &[f64] {
            &[0.0, 0.0]
        }
        fn upper(&self) -> &[f64] {
            &[2.0, 2.0]
        }
        fn objective(&self, x: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64 {
            if let Some(g) = grad {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 2.0 * (x[1] + 1.0);
            }
            (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2)
        }
        fn constraints(&self, _x: &DVector<f64>, _out: &mut DVector<f64>) {}
        fn jacobian(&self, _x: &DVector<f64>, _out: &mut DMatrix<f64>) {}
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            _sigma: &DVector<f64>,
            out: &mut DMatrix<f64>,
        ) {
            out.fill(0.0);
            out[(0, 0)] = 2.0;
            out[(1, 1)] = 2.0;
        }
    }

    /// min x0^2 + x1^2 s.t. x0 + x1 = 4, x in [0,10]^2: optimum (2,2),
    /// multiplier for the constraint in f + nu*c form: nu = -4.
    struct SumQuad;

    impl BoxNlp for SumQuad {
        fn dim(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn lower(&self) -> &[f64] {
            &[0.0, 0.0]
        }
        fn upper(&self) -> &[f64] {
            &[10.0, 10.0]
        }
        fn objective(&self, x: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64 {
            if let Some(g) = grad {
                g[0] = 2.0 * x[0];
                g[1] = 2.0 * x[1];
            }
            x.norm_squared()
        }
        fn constraints(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
            out[0] = x[0] + x[1] - 4.0;
        }
        fn jacobian(&self, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
            out[(0, 0)] = 1.0;
            out[(0, 1)] = 1.0;
        }
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            _sigma: &DVector<f64>,
            out: &mut DMatrix<f64>,
        ) {
            out.fill(0.0);
            out[(0, 0)] = 2.0;
            out[(1, 1)] = 2.0;
        }
    }

    /// x0 = 5 forced by the constraint but upper bound is 2: infeasible.
    struct Infeasible;

    impl BoxNlp for Infeasible {
        fn dim(&self) -> usize {
            1
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn lower(&self) -> &[f64] {
            &[0.0]
        }
        fn upper(&self) -> &[f64] {
            &[2.0]
        }
        fn objective(&self, x: &DVector<f64>, grad: Option<&mut DVector<f64>>) -> f64 {
            if let Some(g) = grad {
                g[0] = 0.0;
            }
            let _ = x;
            0.0
        }
        fn constraints(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
            out[0] = x[0] - 5.0;
        }
        fn jacobian(&self, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
            out[(0, 0)] = 1.0;
        }
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            _sigma: &DVector<f64>,
            out: &mut DMatrix<f64>,
        ) {
            out.fill(0.0);
        }
    }

    #[test]
    fn bound_constrained_quadratic() {
        let r = solve_box_nlp(
            &BoxQuad,
            &DVector::from_vec(vec![1.0, 1.0]),
            None,
            &NlpOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(r.x[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(r.x[1], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn equality_constrained_quadratic_with_multiplier() {
        let r = solve_box_nlp(
            &SumQuad,
            &DVector::from_vec(vec![0.0, 0.0]),
            None,
            &NlpOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(r.x[0], 2.0, epsilon = 1e-7);
        assert_relative_eq!(r.x[1], 2.0, epsilon = 1e-7);
        assert_relative_eq!(r.multipliers[0], -4.0, epsilon = 1e-5);
        assert!(r.residual <= 1e-8);
    }

    #[test]
    fn infeasible_reports_stall() {
        let err = solve_box_nlp(
            &Infeasible,
            &DVector::from_vec(vec![0.0]),
            None,
            &NlpOptions {
                max_inner: 2000,
                ..NlpOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.stalled, "{err}");
        assert!(err.residual > 1.0);
    }

    #[test]
    fn warm_start_multipliers_accepted() {
        let warm = DVector::from_vec(vec![-4.0]);
        let r = solve_box_nlp(
            &SumQuad,
            &DVector::from_vec(vec![2.0, 2.0]),
            Some(&warm),
            &NlpOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(r.x[0], 2.0, epsilon = 1e-8);
        assert!(r.inner_iterations <= 5);
    }
}
