//! Dense convex quadratic programming.
//!
//! Solves `minimize 0.5 z'Hz + g'z` subject to `A z = b`, `C z <= d` with
//! a Mehrotra predictor-corrector primal-dual interior-point method. Each
//! iteration factors one symmetric quasi-definite saddle matrix
//!
//! ```text
//! [ -(S/Lambda + delta I)        0        C ]
//! [           0              -delta I     A ]
//! [           C'                 A'       H ]
//! ```
//!
//! with the signed-pivot LDL' in [`ldl`]; the multiplier blocks are
//! eliminated first so the trailing block stays positive definite even
//! when `H` is singular or zero (linear programs). A static `delta`
//! regularizes both multiplier blocks; one round of iterative refinement
//! is applied to every solve.
//!
//! The Hessian is validated on entry: asymmetry is rejected outright and
//! indefiniteness is rejected with an explicit direction of negative
//! curvature. Equality systems are pre-checked for consistency so rank
//! deficiency surfaces as a reported witness instead of a stall.

pub mod ldl;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Static regularization applied to both multiplier blocks.
const DELTA: f64 = 1e-9;
/// Fraction-to-the-boundary factor.
const TAU: f64 = 0.995;
/// Iteration from which the merit function must be non-increasing.
const MONOTONE_FROM: usize = 2;

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive-semidefinite cost curvature, `n_z x n_z`.
    pub h: DMatrix<f64>,
    /// Linear cost, length `n_z`.
    pub g: DVector<f64>,
    /// Equality rows `A z = b` (may have zero rows).
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Inequality rows `C z <= d` (may have zero rows).
    pub c_ineq: DMatrix<f64>,
    pub d_ineq: DVector<f64>,
}

impl QpProblem {
    /// Problem with no constraints, sized for `n_z` variables.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> QpProblem {
        let n = g.len();
        QpProblem {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            c_ineq: DMatrix::zeros(0, n),
            d_ineq: DVector::zeros(0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveSettings {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_iter: usize,
    /// Refine a converged iterate to factorization accuracy with an
    /// active-set cleanup. Worth skipping for throwaway solves that only
    /// need the stated tolerances.
    pub polish: bool,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings { feas_tol: 1e-8, opt_tol: 1e-8, max_iter: 100, polish: true }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Inequality multipliers, nonnegative.
    pub lambda: DVector<f64>,
    /// Inequality slacks `d - C z`, nonnegative.
    pub slack: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Scaled KKT error per iteration; non-increasing from iteration 2 on.
    pub merit_trace: Vec<f64>,
    pub kkt_residual: f64,
}

struct Residuals {
    r_dual: DVector<f64>,
    r_eq: DVector<f64>,
    r_ineq: DVector<f64>,
    merit: f64,
    converged: bool,
    mu: f64,
}

struct Scaling {
    g_scale: f64,
    b_scale: f64,
    d_scale: f64,
}

fn residuals(
    p: &QpProblem,
    sc: &Scaling,
    settings: &SolveSettings,
    z: &DVector<f64>,
    y: &DVector<f64>,
    lambda: &DVector<f64>,
    s: &DVector<f64>,
) -> Residuals {
    let m = p.d_ineq.len();
    let mut r_dual = &p.h * z + &p.g;
    if p.b_eq.len() > 0 {
        r_dual += p.a_eq.transpose() * y;
    }
    if m > 0 {
        r_dual += p.c_ineq.transpose() * lambda;
    }
    let r_eq = &p.a_eq * z - &p.b_eq;
    let r_ineq = &p.c_ineq * z + s - &p.d_ineq;
    let mu = if m > 0 { s.dot(lambda) / m as f64 } else { 0.0 };
    let obj = 0.5 * (z.transpose() * &p.h * z)[(0, 0)] + p.g.dot(z);
    let rd = safe_amax(&r_dual) / sc.g_scale;
    let rp = safe_amax(&r_eq) / sc.b_scale;
    let rc = safe_amax(&r_ineq) / sc.d_scale;
    let mu_rel = mu / (1.0 + obj.abs());
    let merit = rd.max(rp).max(rc).max(mu_rel);
    let converged = rd <= settings.opt_tol
        && rp <= settings.feas_tol
        && rc <= settings.feas_tol
        && mu_rel <= settings.opt_tol;
    Residuals { r_dual, r_eq, r_ineq, merit, converged, mu }
}

fn safe_amax(v: &DVector<f64>) -> f64 {
    if v.len() == 0 {
        0.0
    } else {
        v.amax()
    }
}

/// Solves the problem; see the module documentation for the method.
pub fn solve_qp(p: &QpProblem, settings: &SolveSettings) -> Result<QpSolution> {
    let nz = p.g.len();
    let n_eq = p.b_eq.len();
    let m = p.d_ineq.len();
    if p.h.nrows() != nz || p.h.ncols() != nz {
        return Err(Error::Dimension(format!(
            "Hessian is {}x{} but there are {} variables",
            p.h.nrows(),
            p.h.ncols(),
            nz
        )));
    }
    if p.a_eq.nrows() != n_eq || p.a_eq.ncols() != nz {
        return Err(Error::Dimension("equality block shape mismatch".into()));
    }
    if p.c_ineq.nrows() != m || p.c_ineq.ncols() != nz {
        return Err(Error::Dimension("inequality block shape mismatch".into()));
    }

    // --- Hessian validation -------------------------------------------
    let h_scale = p.h.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    for i in 0..nz {
        for j in 0..i {
            if (p.h[(i, j)] - p.h[(j, i)]).abs() > 1e-12 * (1.0 + h_scale) {
                return Err(Error::SolverFailure(format!(
                    "cost curvature is not symmetric at ({i}, {j}): {} vs {}",
                    p.h[(i, j)],
                    p.h[(j, i)]
                )));
            }
        }
    }
    if let Some((curvature, direction)) = ldl::negative_curvature_probe(&p.h) {
        return Err(Error::IndefiniteHessian {
            curvature,
            direction: direction.iter().cloned().collect(),
        });
    }

    // --- Equality consistency pre-check -------------------------------
    if n_eq > 0 {
        // Least-squares residual via SVD handles wide and rank-deficient
        // blocks alike; a nonzero residual certifies inconsistency.
        let svd = p.a_eq.clone().svd(true, true);
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
        let z_ls = svd
            .solve(&p.b_eq, 1e-12 * (1.0 + smax))
            .map_err(|e| Error::SolverFailure(format!("equality pre-check failed: {e}")))?;
        let resid = &p.a_eq * &z_ls - &p.b_eq;
        let worst = safe_amax(&resid);
        if worst > settings.feas_tol * (1.0 + safe_amax(&p.b_eq)) {
            let norm = resid.norm();
            return Err(Error::InconsistentEqualities {
                residual: worst,
                witness: (resid / norm).iter().cloned().collect(),
            });
        }
    }

    let sc = Scaling {
        g_scale: 1.0 + safe_amax(&p.g),
        b_scale: 1.0 + safe_amax(&p.b_eq),
        d_scale: 1.0 + safe_amax(&p.d_ineq),
    };

    // --- Starting point ------------------------------------------------
    let eps_start = 1e-9 * (1.0 + h_scale);
    let n_init = nz + n_eq;
    let mut k_init = DMatrix::zeros(n_init, n_init);
    // Order [y; z] so the negative block is eliminated first.
    for i in 0..n_eq {
        k_init[(i, i)] = -DELTA;
        for j in 0..nz {
            k_init[(i, n_eq + j)] = p.a_eq[(i, j)];
            k_init[(n_eq + j, i)] = p.a_eq[(i, j)];
        }
    }
    for i in 0..nz {
        for j in 0..nz {
            k_init[(n_eq + i, n_eq + j)] = p.h[(i, j)];
        }
        k_init[(n_eq + i, n_eq + i)] += eps_start;
    }
    let mut signs = vec![-1i8; n_eq];
    signs.extend(std::iter::repeat(1i8).take(nz));
    let floor = 1e-12 * (1.0 + h_scale);
    let (f0, _) = ldl::factor_signed(&k_init, &signs, floor)?;
    let mut rhs0 = DVector::zeros(n_init);
    for i in 0..n_eq {
        rhs0[i] = p.b_eq[i];
    }
    for j in 0..nz {
        rhs0[n_eq + j] = -p.g[j];
    }
    let mut sol0 = f0.solve(&rhs0);
    // A vanishing Hessian (linear programs) makes the regularized start
    // explode; pull it back to a sane ball, the method starts infeasible
    // anyway.
    let cap = 1e4 * (1.0 + safe_amax(&p.g) + safe_amax(&p.b_eq) + safe_amax(&p.d_ineq));
    let start_norm = safe_amax(&sol0);
    if start_norm > cap {
        sol0 *= cap / start_norm;
    }
    let mut y = DVector::from_iterator(n_eq, (0..n_eq).map(|i| sol0[i]));
    let mut z = DVector::from_iterator(nz, (0..nz).map(|j| sol0[n_eq + j]));
    let mut s = DVector::from_element(m, 1.0);
    if m > 0 {
        let gap = &p.d_ineq - &p.c_ineq * &z;
        for i in 0..m {
            s[i] = gap[i].max(1.0);
        }
    }
    let mut lambda = DVector::from_element(m, 1.0);

    // --- Main loop ------------------------------------------------------
    // Only the slack-over-multiplier diagonal changes between iterations;
    // the constraint and curvature blocks are assembled once.
    let n_tot = m + n_eq + nz;
    let mut k_full = DMatrix::zeros(n_tot, n_tot);
    for i in 0..m {
        for j in 0..nz {
            let v = p.c_ineq[(i, j)];
            if v != 0.0 {
                k_full[(i, m + n_eq + j)] = v;
                k_full[(m + n_eq + j, i)] = v;
            }
        }
    }
    for i in 0..n_eq {
        k_full[(m + i, m + i)] = -DELTA;
        for j in 0..nz {
            let v = p.a_eq[(i, j)];
            if v != 0.0 {
                k_full[(m + i, m + n_eq + j)] = v;
                k_full[(m + n_eq + j, m + i)] = v;
            }
        }
    }
    for j in 0..nz {
        for i in 0..nz {
            k_full[(m + n_eq + i, m + n_eq + j)] = p.h[(i, j)];
        }
    }
    let mut signs = vec![-1i8; m + n_eq];
    signs.extend(std::iter::repeat(1i8).take(nz));
    let mut merit_trace = Vec::new();
    let mut mu_history: Vec<f64> = Vec::new();

    // Largest constraint coefficient, for normalizing unboundedness
    // certificates of the dual (= infeasibility certificates of the
    // primal) below.
    let mat_norm = {
        let mut v = 0.0f64;
        for x in p.c_ineq.iter().chain(p.a_eq.iter()) {
            v = v.max(x.abs());
        }
        1.0 + v
    };
    let rhs_norm = 1.0 + safe_amax(&p.d_ineq).max(safe_amax(&p.b_eq));
    // A multiplier pair certifies that no point satisfies the
    // constraints when the combined gradient vanishes while the combined
    // right side is negative: any feasible z would give
    // 0 <= lambda'(d - Cz) + y'(b - Az) = val - w'z < 0.
    let farkas = |y_cand: &DVector<f64>, l_cand: &DVector<f64>| -> Option<String> {
        let lam = l_cand.map(|v| v.max(0.0));
        let scale = safe_amax(&lam).max(safe_amax(y_cand));
        if scale <= 0.0 {
            return None;
        }
        let lam = lam / scale;
        let yh = y_cand / scale;
        let w = p.c_ineq.transpose() * &lam + p.a_eq.transpose() * &yh;
        let val = (p.d_ineq.dot(&lam) + p.b_eq.dot(&yh)) / rhs_norm;
        let w_rel = safe_amax(&w) / mat_norm;
        (val < 0.0 && w_rel <= 1e-5 * (-val)).then(|| {
            format!(
                "a multiplier ray certifies the constraints unsatisfiable \
                 (residual {w_rel:.1e}, margin {:.1e})",
                -val
            )
        })
    };

    for iter in 0..settings.max_iter {
        let res = residuals(p, &sc, settings, &z, &y, &lambda, &s);
        merit_trace.push(res.merit);
        if res.converged {
            // Polishing can tighten the point to factorization accuracy;
            // keep the interior iterate when it cannot.
            if settings.polish {
                if let Some((mut polished, pres)) = polish(p, &sc, settings, &lambda, &s, floor)
                {
                    if pres.converged && pres.merit <= res.merit {
                        merit_trace.push(pres.merit);
                        polished.iterations = iter;
                        polished.merit_trace = merit_trace;
                        return Ok(polished);
                    }
                }
            }
            let objective = 0.5 * (z.transpose() * &p.h * &z)[(0, 0)] + p.g.dot(&z);
            return Ok(QpSolution {
                z,
                y,
                lambda,
                slack: s,
                objective,
                iterations: iter,
                kkt_residual: res.merit,
                merit_trace,
            });
        }

        // Infeasibility: primal residuals refuse to fall while the
        // multipliers diverge.
        mu_history.push(res.mu);
        let lam_inf = safe_amax(&lambda).max(safe_amax(&y));
        if iter >= 10 {
            let prim = (safe_amax(&res.r_eq) / sc.b_scale).max(safe_amax(&res.r_ineq) / sc.d_scale);
            let old_mu = mu_history[iter - 10];
            let stalled = res.merit > 0.999 * merit_trace[iter - 10];
            if prim > 100.0 * settings.feas_tol
                && lam_inf > 1e8 * (1.0 + safe_amax(&z))
                && (stalled || res.mu > 10.0 * old_mu.max(1e-300))
            {
                return Err(Error::Infeasible(format!(
                    "constraints appear unsatisfiable: primal residual {prim:.3e} stalled \
                     while multipliers reached {lam_inf:.3e}"
                )));
            }
        }

        // --- refresh the barrier diagonal and factor --------------------
        for i in 0..m {
            let ratio = (s[i] / lambda[i]).clamp(1e-16, 1e16);
            k_full[(i, i)] = -(ratio + DELTA);
        }
        let (factor, _) = ldl::factor_signed(&k_full, &signs, floor)?;
        let solve_refined = |rhs: &DVector<f64>| -> DVector<f64> {
            let mut sol = factor.solve(rhs);
            let rhs_scale = 1.0 + safe_amax(rhs);
            for _ in 0..4 {
                let resid = rhs - &k_full * &sol;
                if safe_amax(&resid) <= 1e-14 * rhs_scale {
                    break;
                }
                sol += factor.solve(&resid);
            }
            sol
        };

        // --- predictor --------------------------------------------------
        // Complementarity residual r_sl = S Lambda e - target.
        let pack = |r_sl: &DVector<f64>, res: &Residuals| -> DVector<f64> {
            let mut rhs = DVector::zeros(n_tot);
            for i in 0..m {
                rhs[i] = -res.r_ineq[i] + r_sl[i] / lambda[i];
            }
            for i in 0..n_eq {
                rhs[m + i] = -res.r_eq[i];
            }
            for j in 0..nz {
                rhs[m + n_eq + j] = -res.r_dual[j];
            }
            rhs
        };
        let r_sl_aff = DVector::from_fn(m, |i, _| s[i] * lambda[i]);
        let sol_aff = solve_refined(&pack(&r_sl_aff, &res));
        let dl_aff = sol_aff.rows(0, m).into_owned();
        let ds_aff =
            DVector::from_fn(m, |i, _| -r_sl_aff[i] / lambda[i] - s[i] / lambda[i] * dl_aff[i]);

        let (ap_aff, ad_aff) = step_lengths(&s, &lambda, &ds_aff, &dl_aff, 1.0);
        let mu = res.mu;
        let mu_aff = if m > 0 {
            let mut acc = 0.0;
            for i in 0..m {
                acc += (s[i] + ap_aff * ds_aff[i]) * (lambda[i] + ad_aff * dl_aff[i]);
            }
            acc / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { ((mu_aff / mu).clamp(0.0, 1.0)).powi(3) } else { 0.0 };

        // --- corrector --------------------------------------------------
        let r_sl =
            DVector::from_fn(m, |i, _| s[i] * lambda[i] + ds_aff[i] * dl_aff[i] - sigma * mu);
        let sol = solve_refined(&pack(&r_sl, &res));
        let dl = sol.rows(0, m).into_owned();
        let dy = sol.rows(m, n_eq).into_owned();
        let dz = sol.rows(m + n_eq, nz).into_owned();
        let ds = DVector::from_fn(m, |i, _| -r_sl[i] / lambda[i] - s[i] / lambda[i] * dl[i]);

        let (mut ap, mut ad) = step_lengths(&s, &lambda, &ds, &dl, TAU);

        // --- merit-guarded acceptance -----------------------------------
        // Separate primal/dual steps advance complementarity fastest, but
        // they couple into the dual residual through (ap − ad)·H·dz, which
        // can exceed the residual itself near degeneracy. The common step
        // min(ap, ad) shrinks every residual block linearly, so each
        // halving level tries the asymmetric pair first and the common
        // step as the fallback.
        let mut accepted = false;
        'search: for _halve in 0..40 {
            let common = ap.min(ad);
            for &(a_p, a_d) in &[(ap, ad), (common, common)] {
                let z_new = &z + &dz * a_p;
                let y_new = &y + &dy * a_d;
                let l_new = DVector::from_fn(m, |i, _| (lambda[i] + a_d * dl[i]).max(1e-300));
                let s_new = DVector::from_fn(m, |i, _| (s[i] + a_p * ds[i]).max(1e-300));
                let cand = residuals(p, &sc, settings, &z_new, &y_new, &l_new, &s_new);
                if iter < MONOTONE_FROM || cand.merit <= res.merit * (1.0 + 1e-12) {
                    z = z_new;
                    y = y_new;
                    lambda = l_new;
                    s = s_new;
                    accepted = true;
                    break 'search;
                }
                if ap == ad {
                    break;
                }
            }
            ap *= 0.5;
            ad *= 0.5;
        }
        if !accepted {
            // The search direction has degraded with the barrier's
            // conditioning; the iterate may still pinpoint the active set.
            if let Some((mut polished, pres)) = polish(p, &sc, settings, &lambda, &s, floor)
            {
                if pres.converged && pres.merit <= merit_trace.last().copied().unwrap_or(f64::MAX)
                {
                    merit_trace.push(pres.merit);
                    polished.iterations = iter;
                    polished.merit_trace = merit_trace;
                    return Ok(polished);
                }
            }
            for (yc, lc) in [(&y, &lambda), (&dy, &dl)] {
                if let Some(msg) = farkas(yc, lc) {
                    return Err(Error::Infeasible(msg));
                }
            }
            return Err(Error::SolverFailure(format!(
                "no acceptable step at iteration {iter}: merit {:.3e} cannot decrease",
                res.merit
            )));
        }
    }

    if let Some((mut polished, pres)) = polish(p, &sc, settings, &lambda, &s, floor) {
        if pres.converged && pres.merit <= merit_trace.last().copied().unwrap_or(f64::MAX) {
            merit_trace.push(pres.merit);
            polished.iterations = settings.max_iter;
            polished.merit_trace = merit_trace;
            return Ok(polished);
        }
    }
    Err(Error::SolverFailure(format!(
        "no convergence within {} iterations (last merit {:.3e})",
        settings.max_iter,
        merit_trace.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Refines an interior iterate into an exact active-set solution.
///
/// The barrier keeps every iterate strictly interior, so the final point
/// carries a small complementarity haze and the saddle systems grow
/// ill-conditioned as it fades. Snapping to the active set predicted by
/// the iterate (rows with multiplier dominating slack), solving the
/// purely equality-constrained KKT system, and letting single rows enter
/// or leave on sign violations produces a point accurate to the
/// factorization, not to the barrier. The caller gates acceptance on the
/// full KKT residuals, so a wrong guess degrades into a no-op rather
/// than a wrong answer.
fn polish(
    p: &QpProblem,
    sc: &Scaling,
    settings: &SolveSettings,
    lambda0: &DVector<f64>,
    s0: &DVector<f64>,
    floor: f64,
) -> Option<(QpSolution, Residuals)> {
    let nz = p.g.len();
    let n_eq = p.b_eq.len();
    let m = p.d_ineq.len();
    let feas_eps = 10.0 * settings.feas_tol * sc.d_scale;
    let dual_eps = 10.0 * settings.opt_tol * (1.0 + safe_amax(lambda0));
    // Predicted actives: multiplier dominates slack, or the row is nearly
    // tight. The second clause matters when polishing a stalled (not yet
    // converged) iterate whose multipliers undershoot on rows the optimum
    // pins.
    let tight_eps = feas_eps.max(1e-7 * sc.d_scale);
    let mut active: Vec<bool> =
        (0..m).map(|i| lambda0[i] >= s0[i] || s0[i] <= tight_eps).collect();

    for _pass in 0..60 {
        let rows: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
        let n_a = rows.len();
        let n_tot = n_a + n_eq + nz;
        // Factor the regularized saddle, but refine against the exact one
        // so the regularization does not leak into the answer.
        let mut k_reg = DMatrix::zeros(n_tot, n_tot);
        let mut k_exact = DMatrix::zeros(n_tot, n_tot);
        for (ai, &i) in rows.iter().enumerate() {
            k_reg[(ai, ai)] = -DELTA;
            for j in 0..nz {
                let v = p.c_ineq[(i, j)];
                if v != 0.0 {
                    k_reg[(ai, n_a + n_eq + j)] = v;
                    k_reg[(n_a + n_eq + j, ai)] = v;
                    k_exact[(ai, n_a + n_eq + j)] = v;
                    k_exact[(n_a + n_eq + j, ai)] = v;
                }
            }
        }
        for e in 0..n_eq {
            k_reg[(n_a + e, n_a + e)] = -DELTA;
            for j in 0..nz {
                let v = p.a_eq[(e, j)];
                if v != 0.0 {
                    k_reg[(n_a + e, n_a + n_eq + j)] = v;
                    k_reg[(n_a + n_eq + j, n_a + e)] = v;
                    k_exact[(n_a + e, n_a + n_eq + j)] = v;
                    k_exact[(n_a + n_eq + j, n_a + e)] = v;
                }
            }
        }
        for i in 0..nz {
            for j in 0..nz {
                k_reg[(n_a + n_eq + i, n_a + n_eq + j)] = p.h[(i, j)];
                k_exact[(n_a + n_eq + i, n_a + n_eq + j)] = p.h[(i, j)];
            }
        }
        let mut signs = vec![-1i8; n_a + n_eq];
        signs.extend(std::iter::repeat(1i8).take(nz));
        let (factor, _) = ldl::factor_signed(&k_reg, &signs, floor).ok()?;
        let mut rhs = DVector::zeros(n_tot);
        for (ai, &i) in rows.iter().enumerate() {
            rhs[ai] = p.d_ineq[i];
        }
        for e in 0..n_eq {
            rhs[n_a + e] = p.b_eq[e];
        }
        for j in 0..nz {
            rhs[n_a + n_eq + j] = -p.g[j];
        }
        let mut sol = factor.solve(&rhs);
        for _ in 0..3 {
            let resid = &rhs - &k_exact * &sol;
            if safe_amax(&resid) <= 1e-14 * (1.0 + safe_amax(&rhs)) {
                break;
            }
            sol += factor.solve(&resid);
        }
        let lam_a = sol.rows(0, n_a).into_owned();
        let y = sol.rows(n_a, n_eq).into_owned();
        let z = sol.rows(n_a + n_eq, nz).into_owned();
        let gap = &p.d_ineq - &p.c_ineq * &z;

        // Rows with negative multipliers all leave at once (near-duplicate
        // rows split their weight, so they must exit together), then the
        // most violated inequality enters one at a time; a pass with
        // neither means the guess is consistent.
        // Only the single most negative multiplier leaves per pass: with
        // nearly dependent rows the equality solve can split weight so
        // that genuinely binding rows show negative multipliers, and
        // dropping them together walks in circles.
        let mut drop_row: Option<(usize, f64)> = None;
        for (ai, &i) in rows.iter().enumerate() {
            if lam_a[ai] < -dual_eps && drop_row.is_none_or(|(_, worst)| lam_a[ai] < worst) {
                drop_row = Some((i, lam_a[ai]));
            }
        }
        if let Some((i, _)) = drop_row {
            active[i] = false;
            continue;
        }
        // Violated rows enter in a small most-violated-first batch: one at
        // a time is too slow when the prediction misses many rows, while
        // admitting every violated row at once can activate a nearly
        // dependent set whose equality solve explodes.
        let mut violated: Vec<(usize, f64)> = (0..m)
            .filter(|&i| !active[i] && gap[i] < -feas_eps)
            .map(|i| (i, gap[i]))
            .collect();
        if !violated.is_empty() {
            violated.sort_by(|a, b| a.1.total_cmp(&b.1));
            for &(i, _) in violated.iter().take(8) {
                active[i] = true;
            }
            continue;
        }

        let mut lambda = DVector::zeros(m);
        for (ai, &i) in rows.iter().enumerate() {
            lambda[i] = lam_a[ai].max(0.0);
        }
        let s = DVector::from_fn(m, |i, _| gap[i].max(0.0));
        let res = residuals(p, sc, settings, &z, &y, &lambda, &s);
        let objective = 0.5 * (z.transpose() * &p.h * &z)[(0, 0)] + p.g.dot(&z);
        let solution = QpSolution {
            z,
            y,
            lambda,
            slack: s,
            objective,
            iterations: 0,
            merit_trace: Vec::new(),
            kkt_residual: res.merit,
        };
        return Some((solution, res));
    }
    None
}

fn step_lengths(
    s: &DVector<f64>,
    lambda: &DVector<f64>,
    ds: &DVector<f64>,
    dl: &DVector<f64>,
    tau: f64,
) -> (f64, f64) {
    let mut ap = 1.0f64;
    let mut ad = 1.0f64;
    for i in 0..s.len() {
        if ds[i] < 0.0 {
            ap = ap.min(-tau * s[i] / ds[i]);
        }
        if dl[i] < 0.0 {
            ad = ad.min(-tau * lambda[i] / dl[i]);
        }
    }
    (ap.min(1.0), ad.min(1.0))
}
