//! Controller synthesis: worst-case feasible affine policies and the
//! moment-relaxed lower bound on any decentralized policy's cost.
//!
//! [`synthesize_policy`] minimizes the expected operating cost over
//! decentralized affine disturbance-feedback policies subject to the
//! operating constraints holding for *every* disturbance in the support
//! set, with the reactive capability replaced by its inscribed box (so
//! feasibility transfers to the true curved set). [`compute_lower_bound`]
//! solves the companion relaxation — constraints enforced in a weak
//! moment sense over the circumscribed reactive set — whose value can
//! only sit below the best achievable cost. Together the two values
//! bracket the optimality gap of the synthesized controller.
//!
//! Worst-case feasibility over a box has an exact closed-form supremum
//! per constraint row, and each supremum yields a nonnegative multiplier
//! certificate ([`dualize_row`], [`certify`]); both programs are solved
//! by constraint generation over a shared master QP (see [`cuts`]).

pub mod cuts;
pub mod reduction;

use nalgebra::{DMatrix, DVector};

use crate::assembly::{
    build_constraints, build_lifted_system, reactive_headroom, ReactiveApproximation,
};
use crate::error::{Error, Result};
use crate::network::RadialNetwork;
use crate::policy::AffinePolicy;
use crate::qp::{solve_qp, QpProblem, SolveSettings};
use crate::scenario::{
    check_assumption_independence, compute_moment_matrix, DisturbanceModel, ResourceSet,
    SupportSet,
};

pub use cuts::{
    build_robust_counterpart, live_constraint_rows, moment_directions_box,
    moment_directions_polytope, row_coefficients, CutLoopStats, Oracle, RobustCounterpart,
};
pub use reduction::{
    build_master_objective, build_objective_data, build_var_map, moment_regular,
    objective_value, pins_for_bound, pins_for_synthesis, MasterObjective, ObjectiveData,
    RowPins, VarMap,
};

// ---------------------------------------------------------------------
// linear optimization over a support set
// ---------------------------------------------------------------------

/// Maximum of a linear functional over a support set, with the dual
/// certificate of optimality.
#[derive(Debug, Clone)]
pub struct SupportMax {
    pub value: f64,
    /// A maximizing point of the support set.
    pub maximizer: DVector<f64>,
    /// Multiplier on the normalization row `e1 . xi = 1`; equals the
    /// optimal value.
    pub eq_dual: f64,
    /// Nonnegative multipliers on the support rows `W xi >= 0` (for a
    /// box: the canonical two-rows-per-coordinate order, lower first).
    pub row_duals: DVector<f64>,
}

/// Maximizes `obj . xi` over the support set (the vector includes the
/// leading constant coordinate, which is fixed at 1).
///
/// Boxes are solved in closed form coordinate by coordinate; polytopes
/// through a linear program. Either way the duals reconstruct the
/// objective exactly: `obj = eq_dual * e1 - W' row_duals`.
pub fn support_linear_max(support: &SupportSet, obj: &DVector<f64>) -> Result<SupportMax> {
    match support {
        SupportSet::Box { lo, hi } => {
            if obj.len() != lo.len() + 1 {
                return Err(Error::Dimension(format!(
                    "objective over {} coordinates against a {}-coordinate box",
                    obj.len(),
                    lo.len() + 1
                )));
            }
            let mut value = obj[0];
            let mut maximizer = DVector::zeros(obj.len());
            maximizer[0] = 1.0;
            let mut row_duals = DVector::zeros(2 * lo.len());
            for j in 0..lo.len() {
                let a = obj[j + 1];
                if a * hi[j] >= a * lo[j] {
                    value += a * hi[j];
                    maximizer[j + 1] = hi[j];
                } else {
                    value += a * lo[j];
                    maximizer[j + 1] = lo[j];
                }
                row_duals[2 * j] = (-a).max(0.0);
                row_duals[2 * j + 1] = a.max(0.0);
            }
            Ok(SupportMax { value, maximizer, eq_dual: value, row_duals })
        }
        SupportSet::Polytope { w } => {
            if obj.len() != w.ncols() {
                return Err(Error::Dimension(format!(
                    "objective over {} coordinates against {}-column support rows",
                    obj.len(),
                    w.ncols()
                )));
            }
            let n = obj.len();
            let mut a_eq = DMatrix::zeros(1, n);
            a_eq[(0, 0)] = 1.0;
            let prob = QpProblem {
                h: DMatrix::zeros(n, n),
                g: -obj,
                a_eq,
                b_eq: DVector::from_element(1, 1.0),
                c_ineq: -w,
                d_ineq: DVector::zeros(w.nrows()),
            };
            let sol = solve_qp(&prob, &SolveSettings::default()).map_err(|e| match e {
                Error::Infeasible(msg) => Error::UnboundedSupport(format!(
                    "support polytope is empty or malformed: {msg}"
                )),
                Error::SolverFailure(msg) => Error::UnboundedSupport(format!(
                    "linear optimization over the support polytope failed \
                     (is the support bounded?): {msg}"
                )),
                other => other,
            })?;
            Ok(SupportMax {
                value: -sol.objective,
                maximizer: sol.z,
                eq_dual: sol.y[0],
                row_duals: sol.lambda,
            })
        }
    }
}

// ---------------------------------------------------------------------
// certificates
// ---------------------------------------------------------------------

/// Feasibility certificate for one robust constraint row
/// `sup_xi a . xi <= rhs`: a margin `nu = rhs - sup >= 0` and
/// multipliers `pi >= 0` reproducing the row over the support
/// representation: `rhs e1 - a = nu e1 + W' pi`.
#[derive(Debug, Clone)]
pub struct RowCertificate {
    pub sup: f64,
    pub nu: f64,
    pub pi: DVector<f64>,
    /// Reconstruction error of the multiplier identity (max norm).
    pub identity_error: f64,
}

/// Builds the certificate for one row. `nu < 0` means the row is
/// violated by exactly `-nu`.
pub fn dualize_row(
    a: &DVector<f64>,
    rhs: f64,
    support: &SupportSet,
) -> Result<RowCertificate> {
    let m = support_linear_max(support, a)?;
    let nu = rhs - m.value;
    let pi = m.row_duals;
    // Identity check: z = rhs e1 - a must equal nu e1 + W' pi.
    let identity_error = match support {
        SupportSet::Box { lo, hi } => {
            let mut err = {
                let wtp0: f64 = (0..lo.len())
                    .map(|j| -lo[j] * pi[2 * j] + hi[j] * pi[2 * j + 1])
                    .sum();
                ((rhs - a[0]) - (nu + wtp0)).abs()
            };
            for j in 0..lo.len() {
                err = err.max((-a[j + 1] - (pi[2 * j] - pi[2 * j + 1])).abs());
            }
            err
        }
        SupportSet::Polytope { w } => {
            let wtp = w.transpose() * &pi;
            let mut err = ((rhs - a[0]) - (nu + wtp[0])).abs();
            for j in 1..a.len() {
                err = err.max((-a[j] - wtp[j]).abs());
            }
            err
        }
    };
    Ok(RowCertificate { sup: m.value, nu, pi, identity_error })
}

/// Aggregate certificate over every constraint row at a fixed policy.
#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub rows: usize,
    /// Largest `sup - rhs` over all rows (<= 0 means robustly feasible).
    pub max_violation: f64,
    /// Largest multiplier-identity reconstruction error.
    pub max_identity_error: f64,
    /// Most negative multiplier (>= 0 up to solver tolerance).
    pub min_multiplier: f64,
}

/// Certifies worst-case feasibility of a full gain matrix row by row.
pub fn certify(
    rc: &RobustCounterpart,
    dm: &DisturbanceModel,
    q_full: &DMatrix<f64>,
) -> Result<CertificateReport> {
    let a = row_coefficients(rc, q_full);
    let mut max_violation = f64::NEG_INFINITY;
    let mut max_identity_error: f64 = 0.0;
    let mut min_multiplier = f64::INFINITY;
    for r in 0..rc.rhs.len() {
        let cert = dualize_row(&a.row(r).transpose(), rc.rhs[r], dm.support())?;
        max_violation = max_violation.max((cert.sup - rc.rhs[r]) / (1.0 + rc.rhs[r].abs()));
        max_identity_error = max_identity_error.max(cert.identity_error);
        min_multiplier = min_multiplier.min(cert.pi.min());
    }
    Ok(CertificateReport {
        rows: rc.rhs.len(),
        max_violation,
        max_identity_error,
        min_multiplier,
    })
}

// ---------------------------------------------------------------------
// the two programs
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub settings: SolveSettings,
    /// Cap on constraint-generation rounds.
    pub max_rounds: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions { settings: SolveSettings::default(), max_rounds: 60 }
    }
}

/// How the solve went, for logs and regression tests.
#[derive(Debug, Clone)]
pub struct SolverReport {
    pub cut_rounds: usize,
    pub cuts: usize,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub pinned_rows: usize,
    pub free_gains: usize,
    /// Signed worst violation over all conditions at the returned policy.
    pub max_violation: f64,
}

/// A worst-case feasible policy and its exact expected cost.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub policy: AffinePolicy,
    /// Expected operating cost of the policy (the program's value).
    pub objective: f64,
    pub certificate: CertificateReport,
    pub report: SolverReport,
}

/// Value of the moment relaxation: a floor under the expected cost of
/// *every* causal decentralized policy that respects the constraints.
#[derive(Debug, Clone)]
pub struct LowerBoundResult {
    pub value: f64,
    /// True when the disturbance model satisfies the independence
    /// assumption under which the floor is certified; a correlated model
    /// still yields the number, but its bounding property is not
    /// established.
    pub certified: bool,
    pub report: SolverReport,
}

/// Synthesizes the decentralized affine policy minimizing expected cost
/// subject to worst-case constraint feasibility over the support set,
/// with the inscribed (inner) reactive capability. The returned policy
/// is feasible for the true constraint set at every support point.
pub fn synthesize_policy(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    let lifted = build_lifted_system(net, res)?;
    let mm = compute_moment_matrix(dm);
    let head = reactive_headroom(res, dm)?;
    let cons = build_constraints(net, res, dm, ReactiveApproximation::Inner)?;
    let rc = build_robust_counterpart(&cons, &lifted, &res.initial_energy_mwh);
    let pins = pins_for_synthesis(res, dm, &head);
    let vmap = build_var_map(dm, &pins);
    let data = build_objective_data(&lifted, &mm, &res.initial_energy_mwh);
    let master = build_master_objective(&data, &mm, &vmap);
    let oracle = match dm.support() {
        SupportSet::Box { lo, hi } => Oracle::BoxVertices { lo: lo.clone(), hi: hi.clone() },
        SupportSet::Polytope { w } => Oracle::Polytope { w: w.clone() },
    };
    let out = cuts::solve_with_cuts(&master, &rc, &vmap, &oracle, &opts.settings, opts.max_rounds)?;
    let q_full = vmap.assemble(&out.q);
    let certificate = certify(&rc, dm, &q_full)?;
    let policy = AffinePolicy::new(dm.dims, q_full)?;
    let objective = objective_value(&data, &mm, &policy.gains);
    Ok(SynthesisResult {
        policy,
        objective,
        certificate,
        report: SolverReport {
            cut_rounds: out.stats.rounds,
            cuts: out.stats.cuts,
            qp_iterations: out.stats.qp_iterations,
            kkt_residual: out.stats.kkt_residual,
            pinned_rows: pins.pinned_count(),
            free_gains: vmap.len(),
            max_violation: out.stats.max_violation,
        },
    })
}

/// Computes the moment-relaxation floor: expected-cost minimization with
/// every constraint row required to hold only against the disturbance's
/// first and second moments, over the circumscribed (outer) reactive
/// capability. Both weakenings only enlarge the feasible set relative to
/// any true policy, so the value bounds the best achievable cost from
/// below.
pub fn compute_lower_bound(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    opts: &SynthesisOptions,
) -> Result<LowerBoundResult> {
    let lifted = build_lifted_system(net, res)?;
    let mm = compute_moment_matrix(dm);
    let cons = build_constraints(net, res, dm, ReactiveApproximation::Outer)?;
    let rc = build_robust_counterpart(&cons, &lifted, &res.initial_energy_mwh);
    let pins = pins_for_bound(res, dm)?;
    let vmap = build_var_map(dm, &pins);
    let data = build_objective_data(&lifted, &mm, &res.initial_energy_mwh);
    let master = build_master_objective(&data, &mm, &vmap);
    let phi = match dm.support() {
        SupportSet::Box { lo, hi } => moment_directions_box(dm, &mm, lo, hi),
        SupportSet::Polytope { w } => moment_directions_polytope(&mm, w),
    };
    let out = cuts::solve_with_cuts(
        &master,
        &rc,
        &vmap,
        &Oracle::FinitePoints { phi },
        &opts.settings,
        opts.max_rounds,
    )?;
    let q_full = vmap.assemble(&out.q);
    let value = objective_value(&data, &mm, &q_full);
    Ok(LowerBoundResult {
        value,
        certified: check_assumption_independence(dm),
        report: SolverReport {
            cut_rounds: out.stats.rounds,
            cuts: out.stats.cuts,
            qp_iterations: out.stats.qp_iterations,
            kkt_residual: out.stats.kkt_residual,
            pinned_rows: pins.pinned_count(),
            free_gains: vmap.len(),
            max_violation: out.stats.max_violation,
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::network::Line;
    use crate::scenario::{LoadSpec, PvLaw, PvSpec, ScenarioSpec, StorageSpec};
    use approx::assert_relative_eq;

    /// Two-bus feeder, two midday periods, storage and PV at the leaf,
    /// uncertain load at the middle bus. `half` is the relative load
    /// band halfwidth; zero makes the whole model deterministic.
    pub(crate) fn micro_case(half: f64) -> ScenarioSpec {
        ScenarioSpec {
            lines: vec![
                Line { bus: 1, parent: 0, r_ohm: 0.4, x_ohm: 0.6 },
                Line { bus: 2, parent: 1, r_ohm: 0.3, x_ohm: 0.5 },
            ],
            base_kv: 12.0,
            v_min_pu: 0.95,
            v_max_pu: 1.05,
            periods: 2,
            period_hours: 1.0,
            start_hour: 11.0,
            storages: vec![StorageSpec {
                bus: 2,
                capacity_mwh: 1.0,
                p_min_mw: -0.4,
                p_max_mw: 0.4,
                initial_mwh: 0.5,
            }],
            pvs: vec![PvSpec { bus: 2, power_capacity_mw: 0.8, apparent_capacity_mva: 1.0 }],
            loads: vec![LoadSpec { bus: 1, peak_mw: 0.5, power_factor: 0.95 }],
            load_band: (1.0 - half, 1.0 + half),
            pv_law: if half == 0.0 { PvLaw::Deterministic } else { PvLaw::Uniform },
        }
    }

    #[test]
    fn box_maximum_agrees_with_polytope_program() {
        use rand::Rng;
        let mut rng = crate::scenario::stream_rng(21, 0);
        for trial in 0..8 {
            let k = 3;
            let lo = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..0.0));
            let hi = DVector::from_fn(k, |j, _| lo[j] + rng.gen_range(0.0..1.5));
            let dims = crate::layout::Dims::new(1, 1);
            let w = crate::assembly::box_to_polytope(dims, &lo, &hi);
            let obj = DVector::from_fn(k + 1, |_, _| rng.gen_range(-2.0..2.0));
            let b = support_linear_max(&SupportSet::Box { lo, hi }, &obj).unwrap();
            let p = support_linear_max(&SupportSet::Polytope { w }, &obj).unwrap();
            assert_relative_eq!(b.value, p.value, epsilon = 1e-6, max_relative = 1e-6);
            assert!(p.row_duals.min() >= -1e-7, "trial {trial}: negative LP duals");
        }
    }

    #[test]
    fn dual_certificates_reconstruct_rows_exactly() {
        use rand::Rng;
        let mut rng = crate::scenario::stream_rng(5, 0);
        let lo = DVector::from_vec(vec![0.0, -2.0, 1.0, 1.0]);
        let hi = DVector::from_vec(vec![1.0, -0.5, 1.0, 4.0]);
        let support = SupportSet::Box { lo, hi };
        for _ in 0..40 {
            let a = DVector::from_fn(5, |_, _| rng.gen_range(-3.0..3.0));
            let rhs = rng.gen_range(-1.0..5.0);
            let cert = dualize_row(&a, rhs, &support).unwrap();
            assert!(cert.identity_error < 1e-12);
            assert!(cert.pi.min() >= 0.0);
            assert_relative_eq!(cert.nu, rhs - cert.sup, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_case_collapses_to_one_plain_qp() {
        // A deterministic disturbance collapses both programs onto a
        // single support point, and (with the reactive bound inactive at
        // the optimum) both must match the nominal QP solved directly
        // over input trajectories.
        let (net, res, dm) = micro_case(0.0).build().unwrap();
        let opts = SynthesisOptions::default();
        let syn = synthesize_policy(&net, &res, &dm, &opts).unwrap();
        let bound = compute_lower_bound(&net, &res, &dm, &opts).unwrap();

        // Direct nominal QP over u, bypassing the reduction machinery.
        let lifted = build_lifted_system(&net, &res).unwrap();
        let mm = compute_moment_matrix(&dm);
        let data = build_objective_data(&lifted, &mm, &res.initial_energy_mwh);
        let cons = build_constraints(&net, &res, &dm, ReactiveApproximation::Inner).unwrap();
        let rc = build_robust_counterpart(&cons, &lifted, &res.initial_energy_mwh);
        let xi = dm.mean_vector();
        let d_ineq = &rc.rhs - &rc.f_xi * &xi - &rc.x0_term;
        let prob = QpProblem {
            h: 2.0 * data.p.clone(),
            g: &data.lin * &xi,
            a_eq: DMatrix::zeros(0, dm.dims.n_u()),
            b_eq: DVector::zeros(0),
            c_ineq: rc.g_u.clone(),
            d_ineq,
        };
        let nominal = solve_qp(&prob, &SolveSettings::default()).unwrap();
        let nominal_value = nominal.objective + data.constant;

        assert_relative_eq!(syn.objective, nominal_value, max_relative = 1e-6);
        assert_relative_eq!(syn.objective, bound.value, max_relative = 1e-6);
        assert!(bound.certified);
    }

    #[test]
    fn lower_bound_sits_below_synthesis_value() {
        let (net, res, dm) = micro_case(0.25).build().unwrap();
        let opts = SynthesisOptions::default();
        let syn = synthesize_policy(&net, &res, &dm, &opts).unwrap();
        let bound = compute_lower_bound(&net, &res, &dm, &opts).unwrap();
        assert!(
            bound.value <= syn.objective + 1e-7 * (1.0 + syn.objective.abs()),
            "floor {} must not exceed policy cost {}",
            bound.value,
            syn.objective
        );
    }

    #[test]
    fn synthesized_policy_survives_every_support_vertex() {
        let (net, res, dm) = micro_case(0.25).build().unwrap();
        let syn = synthesize_policy(&net, &res, &dm, &SynthesisOptions::default()).unwrap();
        assert!(syn.certificate.max_violation <= 1e-7);
        assert!(syn.certificate.max_identity_error <= 1e-9);

        // Brute force: evaluate every constraint row at every vertex of
        // the support box (independent of the separation code path).
        let lifted = build_lifted_system(&net, &res).unwrap();
        let cons = build_constraints(&net, &res, &dm, ReactiveApproximation::Inner).unwrap();
        let rc = build_robust_counterpart(&cons, &lifted, &res.initial_energy_mwh);
        let (lo, hi) = match dm.support() {
            SupportSet::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => unreachable!(),
        };
        let free: Vec<usize> = (0..lo.len()).filter(|&j| lo[j] != hi[j]).collect();
        assert!(free.len() <= 12, "vertex enumeration only meant for small cases");
        let a = row_coefficients(&rc, &syn.policy.gains);
        for mask in 0..(1u32 << free.len()) {
            let mut xi = DVector::zeros(dm.dims.n_xi());
            xi[0] = 1.0;
            for j in 0..lo.len() {
                xi[j + 1] = lo[j];
            }
            for (b, &j) in free.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    xi[j + 1] = hi[j];
                }
            }
            let vals = &a * &xi;
            for r in 0..rc.rhs.len() {
                assert!(
                    vals[r] <= rc.rhs[r] + 1e-6 * (1.0 + rc.rhs[r].abs()),
                    "row {r} violated at vertex {mask}: {} > {}",
                    vals[r],
                    rc.rhs[r]
                );
            }
        }
    }

    #[test]
    fn worst_case_cost_grows_with_uncertainty() {
        let opts = SynthesisOptions::default();
        let mut last = f64::NEG_INFINITY;
        for half in [0.0, 0.1, 0.2] {
            let (net, res, dm) = micro_case(half).build().unwrap();
            let syn = synthesize_policy(&net, &res, &dm, &opts).unwrap();
            assert!(
                syn.objective >= last - 1e-9,
                "cost fell from {last} to {} as the band widened to {half}",
                syn.objective
            );
            last = syn.objective;
        }
    }

    #[test]
    fn resourceless_feeder_reduces_to_fixed_functionals() {
        let mut spec = micro_case(0.1);
        spec.storages.clear();
        spec.pvs.clear();
        let (net, res, dm) = spec.build().unwrap();
        let syn = synthesize_policy(&net, &res, &dm, &SynthesisOptions::default()).unwrap();
        assert_eq!(syn.report.free_gains, 0);
        assert_eq!(syn.policy.gains.iter().filter(|v| **v != 0.0).count(), 0);
        // The cost is the uncontrolled expected loss.
        let lifted = build_lifted_system(&net, &res).unwrap();
        let mm = compute_moment_matrix(&dm);
        let data = build_objective_data(&lifted, &mm, &res.initial_energy_mwh);
        assert_relative_eq!(syn.objective, data.constant, epsilon = 1e-12);
    }

    #[test]
    fn polytope_support_runs_the_lp_oracle_end_to_end() {
        // Same scenario, support declared as the polytope form of its own
        // box: values must match the box path.
        let (net, res, dm) = micro_case(0.2).build().unwrap();
        let (lo, hi) = match dm.support() {
            SupportSet::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => unreachable!(),
        };
        let w = crate::assembly::box_to_polytope(dm.dims, &lo, &hi);
        let dm_poly = crate::scenario::DisturbanceModel::new(
            dm.dims,
            dm.marginals().to_vec(),
        )
        .unwrap()
        .with_polytope_support(w)
        .unwrap();
        let opts = SynthesisOptions::default();
        let a = synthesize_policy(&net, &res, &dm, &opts).unwrap();
        let b = synthesize_policy(&net, &res, &dm_poly, &opts).unwrap();
        assert_relative_eq!(a.objective, b.objective, max_relative = 1e-5);
    }
}
