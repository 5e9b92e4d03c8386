//! Constraint generation for the two robust programs.
//!
//! Both programs minimize the same convex quadratic over the free policy
//! gains subject to a family of linear conditions that is far too large
//! to enumerate (one condition per constraint row per support vertex for
//! the worst-case program; one per row per moment direction for the
//! relaxed one). Every condition, however, has the same shape: for a
//! direction `phi` over the lifted disturbance vector,
//!
//! ```text
//! a_r(Q) . phi <= rhs_r * phi[0]
//! ```
//!
//! where `a_r(Q)` is row `r` of `G_u Q + F_xi + x0-term`, an affine
//! function of the gains. The worst-case program takes `phi` ranging
//! over the support set (the condition at every point is exactly
//! `sup_xi a_r . xi <= rhs_r`); the relaxed program takes the finite set
//! of moment directions. A master QP holds the cuts discovered so far;
//! a separation oracle finds the most violated condition per row, the
//! loop adds it, and terminates when no violation above tolerance
//! remains — at which point the iterate is feasible for the *entire*
//! family, so the master value is exact, not approximate.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::assembly::{ConstraintSet, LiftedSystem};
use crate::error::{Error, Result};
use crate::layout::Dims;
use crate::qp::{solve_qp, QpProblem, SolveSettings};
use crate::scenario::{DisturbanceModel, MomentMatrix, SupportSet};

use super::reduction::{MasterObjective, VarMap};
use super::support_linear_max;

/// The operating constraints with the state recursion substituted in:
/// rows of `g_u u + f_xi xi + x0_term <= rhs` over input and disturbance
/// trajectories only.
#[derive(Debug, Clone)]
pub struct RobustCounterpart {
    pub dims: Dims,
    /// `f_u + f_x B`: total effect of the inputs, direct plus stored.
    pub g_u: DMatrix<f64>,
    pub f_xi: DMatrix<f64>,
    /// `f_x A x0`: effect of the initial stored energy.
    pub x0_term: DVector<f64>,
    pub rhs: DVector<f64>,
}

pub fn build_robust_counterpart(
    cons: &ConstraintSet,
    lifted: &LiftedSystem,
    x0: &DVector<f64>,
) -> RobustCounterpart {
    RobustCounterpart {
        dims: cons.dims,
        g_u: &cons.f_u + &cons.f_x * &lifted.b_lift,
        f_xi: cons.f_xi.clone(),
        x0_term: &cons.f_x * (&lifted.a_lift * x0),
        rhs: cons.rhs.clone(),
    }
}

/// `A(Q) = g_u Q + f_xi + x0_term e1'`: row `r` holds the coefficients of
/// constraint `r` as a linear functional of the disturbance vector.
pub fn row_coefficients(rc: &RobustCounterpart, q_full: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = &rc.g_u * q_full + &rc.f_xi;
    for r in 0..a.nrows() {
        a[(r, 0)] += rc.x0_term[r];
    }
    a
}

/// Constraint rows that actually depend on some free gain. The rest are
/// fixed functionals, satisfied or not regardless of the decision; they
/// are checked once up front.
pub fn live_constraint_rows(rc: &RobustCounterpart, vmap: &VarMap) -> Vec<usize> {
    (0..rc.g_u.nrows())
        .filter(|&r| {
            (0..rc.g_u.ncols()).any(|u| vmap.live_u_row[u] && rc.g_u[(r, u)] != 0.0)
        })
        .collect()
}

/// Where the separation directions come from.
pub enum Oracle {
    /// Worst case over a box support: the exact per-row supremum is a
    /// closed form, attained at a vertex (support bounds over the
    /// non-constant coordinates).
    BoxVertices { lo: DVector<f64>, hi: DVector<f64> },
    /// Worst case over a general polytope support `W xi >= 0`: one
    /// linear program per row.
    Polytope { w: DMatrix<f64> },
    /// A fixed finite family of directions, one column per direction
    /// (the moment conditions of the relaxed program).
    FinitePoints { phi: DMatrix<f64> },
}

impl Oracle {
    /// Most violated condition for one coefficient row: the violation
    /// `a . phi - rhs * phi[0]` and its direction, with a dedup key.
    fn worst(&self, a: &DVector<f64>, rhs: f64) -> Result<(f64, DVector<f64>, CutKey)> {
        match self {
            Oracle::BoxVertices { lo, hi } => {
                let mut sup = a[0];
                let mut phi = DVector::zeros(a.len());
                phi[0] = 1.0;
                let mut bits = vec![0u64; lo.len().div_ceil(64)];
                for j in 0..lo.len() {
                    let c = a[j + 1];
                    if c * hi[j] >= c * lo[j] {
                        sup += c * hi[j];
                        phi[j + 1] = hi[j];
                        bits[j / 64] |= 1 << (j % 64);
                    } else {
                        sup += c * lo[j];
                        phi[j + 1] = lo[j];
                    }
                }
                Ok((sup - rhs, phi, CutKey::Vertex(bits)))
            }
            Oracle::Polytope { w } => {
                let cert = support_linear_max(&SupportSet::Polytope { w: w.clone() }, a)?;
                let key = quantized_key(&cert.maximizer);
                Ok((cert.value - rhs, cert.maximizer, key))
            }
            Oracle::FinitePoints { phi } => {
                let vals = phi.transpose() * a;
                let mut best = (f64::NEG_INFINITY, 0usize);
                for k in 0..phi.ncols() {
                    let viol = vals[k] - rhs * phi[(0, k)];
                    if viol > best.0 {
                        best = (viol, k);
                    }
                }
                Ok((best.0, phi.column(best.1).into_owned(), CutKey::Point(best.1)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CutKey {
    Vertex(Vec<u64>),
    Point(usize),
    Quantized(Vec<i64>),
    /// Bit-exact direction identity; the fallback when a violated
    /// direction collides with an occupied quantization bucket.
    ExactBits(Vec<u64>),
}

/// Identity bucket for separation directions. Coarse enough that a
/// drifting maximizer on a degenerate optimal face maps to one key
/// instead of flooding the pool with near-duplicates; directions that
/// genuinely differ below this resolution change a cut by less than the
/// master can feel.
fn quantized_key(phi: &DVector<f64>) -> CutKey {
    CutKey::Quantized(phi.iter().map(|v| (v * 1e7).round() as i64).collect())
}

struct CutPool {
    /// `(constraint row, direction)` pairs.
    cuts: Vec<(usize, DVector<f64>)>,
    seen: HashSet<(usize, CutKey)>,
}

impl CutPool {
    fn new() -> CutPool {
        CutPool { cuts: Vec::new(), seen: HashSet::new() }
    }

    fn insert(&mut self, row: usize, phi: DVector<f64>, key: CutKey) -> bool {
        if self.seen.insert((row, key)) {
            self.cuts.push((row, phi));
            true
        } else {
            false
        }
    }
}

/// Master inequality rows for the current pool, over the free gains:
/// for cut `(r, phi)` the coefficient on gain `(u_row, c)` is
/// `g_u[r, u_row] * phi[c]`, and the right side absorbs the pinned part.
fn cut_matrix(
    pool: &CutPool,
    rc: &RobustCounterpart,
    vmap: &VarMap,
    a_pin: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = vmap.len();
    let mut c = DMatrix::zeros(pool.cuts.len(), d);
    let mut rhs = DVector::zeros(pool.cuts.len());
    for (i, (r, phi)) in pool.cuts.iter().enumerate() {
        for (v, &(u_row, col)) in vmap.vars.iter().enumerate() {
            c[(i, v)] = rc.g_u[(*r, u_row)] * phi[col];
        }
        rhs[i] = rc.rhs[*r] * phi[0] - a_pin.row(*r).transpose().dot(phi);
    }
    (c, rhs)
}

#[derive(Debug, Clone)]
pub struct CutLoopStats {
    pub rounds: usize,
    pub cuts: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    /// Largest remaining violation at the final iterate (signed; negative
    /// means strictly feasible).
    pub max_violation: f64,
}

pub struct CutLoopResult {
    pub q: DVector<f64>,
    /// Master objective value `1/2 q' h q + g' q` plus the constant.
    pub objective: f64,
    pub stats: CutLoopStats,
}

fn violation_tol(rhs: f64, settings: &SolveSettings) -> f64 {
    settings.feas_tol.max(1e-9) * (1.0 + rhs.abs())
}

/// Runs the cut loop to convergence.
///
/// Every fixed (gain-independent) row is checked once; a violated fixed
/// row means the scenario itself is infeasible. The pool starts empty
/// and gains cuts from the oracle until the worst violation falls below
/// tolerance. Masters are solved coarsely while cuts are still being
/// discovered; once no violation exceeds the coarse gate the loop
/// re-solves at the requested accuracy and only terminates from there.
pub fn solve_with_cuts(
    master: &MasterObjective,
    rc: &RobustCounterpart,
    vmap: &VarMap,
    oracle: &Oracle,
    settings: &SolveSettings,
    max_rounds: usize,
) -> Result<CutLoopResult> {
    let a_pin = row_coefficients(rc, &vmap.q_pin);
    let live = live_constraint_rows(rc, vmap);
    let live_set: HashSet<usize> = live.iter().copied().collect();

    // Fixed rows: their coefficient vector is a_pin regardless of q.
    for r in 0..rc.rhs.len() {
        if live_set.contains(&r) {
            continue;
        }
        let a_row = a_pin.row(r).transpose();
        let (viol, _, _) = oracle.worst(&a_row, rc.rhs[r])?;
        if viol > violation_tol(rc.rhs[r], settings) {
            let id = rc.dims.row_id(r);
            return Err(Error::Infeasible(format!(
                "constraint {} at bus {} period {} fails by {viol:.3e} for every policy",
                id.family.label(),
                id.bus,
                id.t
            )));
        }
    }

    let d = vmap.len();
    if d == 0 {
        return Ok(CutLoopResult {
            q: DVector::zeros(0),
            objective: master.constant,
            stats: CutLoopStats {
                rounds: 0,
                cuts: 0,
                qp_iterations: 0,
                kkt_residual: 0.0,
                max_violation: 0.0,
            },
        });
    }

    let mut pool = CutPool::new();

    let mut qp_iterations = 0;
    let prune_floor = (2 * live.len()).max(512);
    let trace = std::env::var("DERFLOW_TRACE").is_ok();
    let t0 = std::time::Instant::now();

    // While cuts are still being discovered, master accuracy beyond the
    // coarse gate below is wasted: the next round invalidates the
    // iterate anyway. The final rounds re-solve at the requested
    // tolerances, and only they may terminate the loop.
    let coarse = SolveSettings {
        feas_tol: settings.feas_tol.max(1e-6),
        opt_tol: settings.opt_tol.max(1e-6),
        max_iter: settings.max_iter,
        polish: false,
    };
    let mut sharp =
        coarse.feas_tol == settings.feas_tol && coarse.opt_tol == settings.opt_tol;

    // Flat directions of the expected-cost Hessian let the minimizer
    // slide arbitrarily far whenever the cut set changes, so raw
    // round-to-round iterates swing between distant corners and
    // discovery cycles instead of accumulating. A proximal pull toward
    // the previous iterate, fading geometrically with the round count,
    // keeps discovery local; the term is identically zero in the sharp
    // rounds, which are the only ones that can terminate the loop.
    let mut q_prev = DVector::zeros(d);
    let rho0 = master.h.diagonal().mean().max(1e-12);

    for round in 0..max_rounds {
        let (c, d_rhs) = cut_matrix(&pool, rc, vmap, &a_pin);
        let rho = if sharp { 0.0 } else { rho0 * 0.5f64.powi(round as i32) };
        let mut h = master.h.clone();
        let mut g = master.g.clone();
        if rho > 0.0 {
            for i in 0..d {
                h[(i, i)] += rho;
            }
            g.axpy(-rho, &q_prev, 1.0);
        }
        let prob = QpProblem {
            h,
            g,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            c_ineq: c.clone(),
            d_ineq: d_rhs.clone(),
        };
        let round_settings = if sharp { settings } else { &coarse };
        let sol = solve_qp(&prob, round_settings).map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(format!(
                "no policy satisfies the accumulated worst-case conditions: {msg}"
            )),
            other => other,
        })?;
        q_prev = sol.z.clone();
        qp_iterations += sol.iterations;
        let kkt_residual = sol.kkt_residual;

        let q_full = vmap.assemble(&sol.z);
        let a = row_coefficients(rc, &q_full);
        let mut worst_overall = f64::NEG_INFINITY;
        let mut new_cuts = 0usize;
        let mut dup_violation: f64 = 0.0;
        for &r in &live {
            let a_row = a.row(r).transpose();
            let (viol, phi, key) = oracle.worst(&a_row, rc.rhs[r])?;
            worst_overall = worst_overall.max(viol);
            // The coarse gate sits a decade above the coarse master
            // accuracy so that solver noise is never mistaken for a
            // violated condition.
            let gate = if sharp {
                violation_tol(rc.rhs[r], settings)
            } else {
                10.0 * violation_tol(rc.rhs[r], &coarse)
            };
            if viol > gate {
                if pool.insert(r, phi.clone(), key) {
                    new_cuts += 1;
                } else {
                    // The bucket is taken but the direction still cuts:
                    // admit it under its exact identity so progress is
                    // only ever blocked by a literally repeated point.
                    let exact = CutKey::ExactBits(phi.iter().map(|v| v.to_bits()).collect());
                    if pool.insert(r, phi, exact) {
                        new_cuts += 1;
                    } else {
                        dup_violation = dup_violation.max(viol / (1.0 + rc.rhs[r].abs()));
                    }
                }
            }
        }

        if trace {
            eprintln!(
                "cut round {round}{}: master {} rows x {d} vars, {} qp iters, \
                 worst violation {worst_overall:.3e}, {new_cuts} new cuts, {:.1} s",
                if sharp { "" } else { " (coarse)" },
                d_rhs.len(),
                sol.iterations,
                t0.elapsed().as_secs_f64(),
            );
        }
        if new_cuts == 0 {
            if !sharp {
                // Discovery has settled at coarse accuracy; finish the
                // remaining rounds at the requested tolerances.
                sharp = true;
                continue;
            }
            // Tolerate a violated-but-already-present condition only if
            // it sits within the master's own feasibility slack.
            if dup_violation > 100.0 * settings.feas_tol {
                return Err(Error::SolverFailure(format!(
                    "cut generation stalled with a repeated condition violated by {dup_violation:.3e}"
                )));
            }
            return Ok(CutLoopResult {
                q: sol.z,
                objective: sol.objective + master.constant,
                stats: CutLoopStats {
                    rounds: round + 1,
                    cuts: pool.cuts.len(),
                    qp_iterations,
                    kkt_residual,
                    max_violation: worst_overall,
                },
            });
        }

        // Keep the pool from growing without bound: drop cuts that are
        // slack and carry no multiplier. Their keys are forgotten too, so
        // they can return if they become binding again.
        if pool.cuts.len() > prune_floor {
            // Only the first `solved` pool entries were rows of the master
            // just solved; cuts inserted this round have no slack or
            // multiplier yet and stay unconditionally.
            let solved = d_rhs.len();
            let slack = &d_rhs - &c * &sol.z;
            let keep: Vec<bool> = (0..pool.cuts.len())
                .map(|i| {
                    i >= solved
                        || slack[i] <= 1e-4 * (1.0 + d_rhs[i].abs())
                        || sol.lambda[i] > 1e-7
                })
                .collect();
            if keep.iter().any(|k| !k) {
                let mut cuts = Vec::new();
                let mut seen = HashSet::new();
                for (i, (r, phi)) in pool.cuts.drain(..).enumerate() {
                    if keep[i] {
                        cuts.push((r, phi));
                    }
                }
                // Rebuild keys from scratch for the kept cuts: the keys
                // of dropped cuts must not block re-insertion.
                for (r, phi) in &cuts {
                    seen.insert((*r, quantized_key(phi)));
                }
                pool.cuts = cuts;
                pool.seen = seen;
            }
        }
    }

    Err(Error::SolverFailure(format!(
        "constraint generation did not converge within {max_rounds} rounds"
    )))
}

/// Moment directions of the relaxed program for a box support: the mean
/// direction plus, per coordinate with positive variance, two tilted
/// directions mixing the mean with that coordinate. A feasible row
/// satisfies `a . phi <= rhs * phi[0]` for all of them; by the
/// variance bound `var <= (hi - mean)(mean - lo)` every direction is a
/// rescaled point inside the support box, which is why the relaxation
/// can only be looser than the worst case.
pub fn moment_directions_box(
    dm: &DisturbanceModel,
    mm: &MomentMatrix,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DMatrix<f64> {
    let n_xi = dm.dims.n_xi();
    let mu = &mm.mean;
    let var = &mm.variance;
    let mut cols: Vec<DVector<f64>> = vec![mu.clone()];
    for j in 0..n_xi - 1 {
        if var[j + 1] <= 0.0 {
            continue;
        }
        let span_lo = mu[j + 1] - lo[j];
        let span_hi = hi[j] - mu[j + 1];
        let width = hi[j] - lo[j];
        if span_lo > 1e-12 * width {
            let mut p = mu.clone();
            p[j + 1] += var[j + 1] / span_lo;
            cols.push(p);
        }
        if span_hi > 1e-12 * width {
            let mut p = mu.clone();
            p[j + 1] -= var[j + 1] / span_hi;
            cols.push(p);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Moment directions for a general polytope support `W xi >= 0`: the
/// mean plus one direction `M w` per polytope row.
pub fn moment_directions_polytope(mm: &MomentMatrix, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = vec![mm.mean.clone()];
    for r in 0..w.nrows() {
        cols.push(&mm.matrix * w.row(r).transpose());
    }
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_oracle_matches_exhaustive_vertices() {
        let lo = DVector::from_vec(vec![-1.0, 0.5, 2.0]);
        let hi = DVector::from_vec(vec![0.5, 0.5, 3.0]);
        let oracle = Oracle::BoxVertices { lo: lo.clone(), hi: hi.clone() };
        let mut rng = crate::scenario::stream_rng(3, 0);
        use rand::Rng;
        for _ in 0..50 {
            let a = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let (viol, phi, _) = oracle.worst(&a, 0.3).unwrap();
            // Enumerate all 8 sign choices.
            let mut best = f64::NEG_INFINITY;
            for s in 0..8u32 {
                let mut val = a[0];
                for j in 0..3 {
                    val += a[j + 1] * if s >> j & 1 == 1 { hi[j] } else { lo[j] };
                }
                best = best.max(val);
            }
            approx::assert_relative_eq!(viol, best - 0.3, epsilon = 1e-12);
            approx::assert_relative_eq!(a.dot(&phi), best, epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_point_oracle_picks_the_worst_direction() {
        let phi = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![0.5, -1.0]),
        ]);
        let oracle = Oracle::FinitePoints { phi };
        let a = DVector::from_vec(vec![0.0, 1.0]);
        let (viol, dir, key) = oracle.worst(&a, 0.5).unwrap();
        // Values: -0.5, 2 - 0.5 = 1.5, -1 - 0.25 = -1.25.
        approx::assert_relative_eq!(viol, 1.5, epsilon = 1e-12);
        assert_eq!(dir[1], 2.0);
        assert_eq!(key, CutKey::Point(1));
    }

    #[test]
    fn moment_directions_stay_inside_the_support_box() {
        // Variance can never exceed (hi - mean)(mean - lo), so the tilted
        // directions are genuine points of the box.
        let spec = crate::synthesis::tests::micro_case(0.5);
        let (_, _, dm) = spec.build().unwrap();
        let mm = crate::scenario::compute_moment_matrix(&dm);
        let (lo, hi) = match dm.support() {
            SupportSet::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => unreachable!(),
        };
        let phi = moment_directions_box(&dm, &mm, &lo, &hi);
        for k in 0..phi.ncols() {
            assert!((phi[(0, k)] - 1.0).abs() < 1e-12);
            for j in 0..lo.len() {
                assert!(phi[(j + 1, k)] >= lo[j] - 1e-9, "direction {k} leaves the box");
                assert!(phi[(j + 1, k)] <= hi[j] + 1e-9, "direction {k} leaves the box");
            }
        }
    }
}
