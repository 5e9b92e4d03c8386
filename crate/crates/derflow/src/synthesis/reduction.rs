//! Exact reductions of the policy decision space, and the reduced
//! quadratic objective over the remaining free gains.
//!
//! Two reductions shrink the gain matrix without changing the optimal
//! value, and both are *forced* rather than heuristic:
//!
//! * **Row pinning.** When a bus has no storage its charge/discharge
//!   window is the single point `p_min = p_max`, and the feasibility
//!   conditions of either program force the corresponding input rows to
//!   be constant at that value (any disturbance dependence would violate
//!   the two opposing constraint rows). The same holds for reactive rows
//!   whose headroom is exactly zero. Pinned rows leave the decision
//!   space entirely.
//! * **Degenerate-column folding.** A disturbance coordinate whose
//!   support interval is a single point is almost surely constant, so a
//!   gain on it is indistinguishable from a shift of the constant
//!   column. The canonical representative puts the whole effect in the
//!   constant column and drops the redundant gains.
//!
//! The objective is a convex quadratic in the surviving gains: with `P`
//! the loss-weighted input Gram matrix and `M` the disturbance second
//! moment matrix, the expected cost of `u = Q xi` is
//! `tr(Q' P Q M) + tr(L Q M) + const`, so the Hessian over free entries
//! `(r, c)` is `2 P[r, r'] M[c, c']` and stays positive semidefinite as
//! a principal submatrix of a Kronecker product.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{build_policy_mask, LiftedSystem};
use crate::error::{Error, Result};
use crate::layout::{Dims, InputKind};
use crate::scenario::{DisturbanceModel, MomentMatrix, ResourceSet};

/// Forced constant values for input rows, one entry per row of the gain
/// matrix (`None` = the row remains a decision).
#[derive(Debug, Clone)]
pub struct RowPins {
    pub value: Vec<Option<f64>>,
}

impl RowPins {
    pub fn none(dims: Dims) -> RowPins {
        RowPins { value: vec![None; dims.n_u()] }
    }

    pub fn pinned_count(&self) -> usize {
        self.value.iter().filter(|v| v.is_some()).count()
    }
}

/// True when every coordinate with a nondegenerate support interval also
/// has positive variance. The moment-side pinning argument needs this:
/// a zero-variance coordinate spanning an interval contributes vacuous
/// moment conditions, so nothing forces its gains.
pub fn moment_regular(dm: &DisturbanceModel) -> bool {
    let var = dm.variance_vector();
    (0..dm.dims.n_xi() - 1).all(|j| {
        let (lo, hi) = dm.coordinate_interval(j);
        lo == hi || var[j + 1] > 0.0
    })
}

/// Row pins justified by the robust (worst-case) program: a constraint
/// pair `v <= row . xi <= v` over the support forces the row to the
/// constant `v`, and zero reactive headroom forces the reactive row to
/// zero. Only box supports admit the forcing argument; other supports
/// get no pins.
pub fn pins_for_synthesis(
    res: &ResourceSet,
    dm: &DisturbanceModel,
    headroom: &DMatrix<f64>,
) -> RowPins {
    let dims = res.dims;
    let mut pins = RowPins::none(dims);
    if !dm.support().is_box() {
        return pins;
    }
    for t in 0..dims.horizon {
        for bus in 1..=dims.n {
            if res.p_min_mw[bus - 1] == res.p_max_mw[bus - 1] {
                pins.value[dims.u_index(t, bus, InputKind::StoragePower)] =
                    Some(res.p_min_mw[bus - 1]);
            }
            if headroom[(bus - 1, t)] == 0.0 {
                pins.value[dims.u_index(t, bus, InputKind::InverterReactive)] = Some(0.0);
            }
        }
    }
    pins
}

/// Row pins justified by the moment-relaxed program. The opposing mean
/// conditions of a degenerate power window force the row mean to `v`,
/// and the per-coordinate conditions then force every positive-variance
/// gain to zero; with degenerate columns folded away the row is the
/// constant `v`. Applicable only for box supports on moment-regular
/// models — anything else keeps all rows free (still exact, just
/// larger).
pub fn pins_for_bound(res: &ResourceSet, dm: &DisturbanceModel) -> Result<RowPins> {
    let dims = res.dims;
    let mut pins = RowPins::none(dims);
    if !dm.support().is_box() || !moment_regular(dm) {
        return Ok(pins);
    }
    for t in 0..dims.horizon {
        for bus in 1..=dims.n {
            if res.p_min_mw[bus - 1] == res.p_max_mw[bus - 1] {
                pins.value[dims.u_index(t, bus, InputKind::StoragePower)] =
                    Some(res.p_min_mw[bus - 1]);
            }
            let s = res.apparent_capacity_mva[bus - 1];
            if s == 0.0 {
                let coord =
                    dims.xi_index(t, bus, crate::layout::XiKind::PvAvailable) - 1;
                let (lo, hi) = dm.coordinate_interval(coord);
                if hi.abs() > 1e-9 || lo.abs() > 1e-9 {
                    return Err(Error::SupplyExceedsCapacity {
                        bus,
                        peak: hi,
                        capacity: s,
                    });
                }
                pins.value[dims.u_index(t, bus, InputKind::InverterReactive)] = Some(0.0);
            }
        }
    }
    Ok(pins)
}

/// Bidirectional map between the free gain entries and a flat decision
/// vector, plus the pinned remainder of the gain matrix.
#[derive(Debug, Clone)]
pub struct VarMap {
    pub dims: Dims,
    /// Decision index -> `(input row, disturbance column)`.
    pub vars: Vec<(usize, usize)>,
    /// Row-major `(row * n_xi + col)` -> decision index, or -1.
    index: Vec<i32>,
    /// Pinned rows of the gain matrix (zero elsewhere).
    pub q_pin: DMatrix<f64>,
    /// True for input rows that remain decisions.
    pub live_u_row: Vec<bool>,
}

impl VarMap {
    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var_at(&self, row: usize, col: usize) -> Option<usize> {
        let v = self.index[row * self.dims.n_xi() + col];
        (v >= 0).then_some(v as usize)
    }

    /// Full gain matrix for a decision vector.
    pub fn assemble(&self, q: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(q.len(), self.vars.len());
        let mut full = self.q_pin.clone();
        for (v, &(r, c)) in self.vars.iter().enumerate() {
            full[(r, c)] = q[v];
        }
        full
    }
}

/// Builds the decision-variable map: causal mask, minus pinned rows,
/// minus gains on support-degenerate columns (box supports only — a
/// general polytope does not fix any coordinate, so nothing is dropped).
pub fn build_var_map(dm: &DisturbanceModel, pins: &RowPins) -> VarMap {
    let dims = dm.dims;
    let mask = build_policy_mask(dims);
    let n_xi = dims.n_xi();
    let mut dropped = vec![false; n_xi];
    if dm.support().is_box() {
        for j in 0..n_xi - 1 {
            let (lo, hi) = dm.coordinate_interval(j);
            dropped[j + 1] = lo == hi;
        }
    }
    let mut vars = Vec::new();
    let mut index = vec![-1i32; dims.n_u() * n_xi];
    let mut q_pin = DMatrix::zeros(dims.n_u(), n_xi);
    let mut live_u_row = vec![false; dims.n_u()];
    for r in 0..dims.n_u() {
        match pins.value[r] {
            Some(v) => q_pin[(r, 0)] = v,
            None => {
                live_u_row[r] = true;
                for c in 0..n_xi {
                    if mask[(r, c)] && !dropped[c] {
                        index[r * n_xi + c] = vars.len() as i32;
                        vars.push((r, c));
                    }
                }
            }
        }
    }
    VarMap { dims, vars, index, q_pin, live_u_row }
}

/// Disturbance-independent pieces of the expected-cost functional
/// `J(Q) = tr(Q' P Q M) + tr(lin' Q M)' ... + constant`:
/// `p` is the loss-weighted input Gram matrix, `lin` collects the
/// loss/input cross term and the terminal-energy sensitivity, and
/// `constant` is the policy-independent cost floor.
#[derive(Debug, Clone)]
pub struct ObjectiveData {
    /// `n_u x n_u`, symmetric positive definite.
    pub p: DMatrix<f64>,
    /// `n_u x n_xi`; the linear coefficient on `Q` is `lin * M`.
    pub lin: DMatrix<f64>,
    /// Policy-independent cost.
    pub constant: f64,
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

pub fn build_objective_data(
    lifted: &LiftedSystem,
    mm: &MomentMatrix,
    x0: &DVector<f64>,
) -> ObjectiveData {
    let loss = &lifted.loss;
    let slu = scale_rows(&loss.loss_u, &loss.sigma);
    let slxi = scale_rows(&loss.loss_xi, &loss.sigma);
    let mut p = loss.loss_u.transpose() * &slu;
    // Symmetrize: the Gram product is symmetric up to rounding, and the
    // reduced Hessian inherits exact symmetry entrywise from `p` and `M`.
    for r in 0..p.nrows() {
        for c in 0..r {
            let v = 0.5 * (p[(r, c)] + p[(c, r)]);
            p[(r, c)] = v;
            p[(c, r)] = v;
        }
    }
    let mut lin = loss.loss_u.transpose() * &slxi * 2.0;
    let bc = lifted.b_lift.transpose() * &lifted.terminal_cost;
    for r in 0..lin.nrows() {
        lin[(r, 0)] += bc[r];
    }
    // tr(Lxi' Sigma Lxi M) = sum of (Sigma Lxi) .* (Lxi M).
    let lxim = &loss.loss_xi * &mm.matrix;
    let fixed_loss = slxi.iter().zip(lxim.iter()).map(|(a, b)| a * b).sum::<f64>();
    let terminal_fixed = lifted.terminal_cost.dot(&(&lifted.a_lift * x0));
    ObjectiveData { p, lin, constant: fixed_loss + terminal_fixed }
}

/// Expected cost of the policy `q_full` under the moment matrix used to
/// build `data`. Exact (not a relaxation): the cost is quadratic in the
/// disturbance, so first and second moments determine its expectation.
pub fn objective_value(
    data: &ObjectiveData,
    mm: &MomentMatrix,
    q_full: &DMatrix<f64>,
) -> f64 {
    let pqm = &data.p * q_full * &mm.matrix;
    let quad = pqm.iter().zip(q_full.iter()).map(|(a, b)| a * b).sum::<f64>();
    let linm = &data.lin * &mm.matrix;
    let lin = linm.iter().zip(q_full.iter()).map(|(a, b)| a * b).sum::<f64>();
    quad + lin + data.constant
}

/// The objective restricted to the free gains: `J(q) = 1/2 q' h q + g' q
/// + constant` with `h` symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct MasterObjective {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub constant: f64,
}

pub fn build_master_objective(
    data: &ObjectiveData,
    mm: &MomentMatrix,
    vmap: &VarMap,
) -> MasterObjective {
    let d = vmap.len();
    let m = &mm.matrix;
    let mut h = DMatrix::zeros(d, d);
    for a in 0..d {
        let (ra, ca) = vmap.vars[a];
        for b in a..d {
            let (rb, cb) = vmap.vars[b];
            let v = 2.0 * data.p[(ra, rb)] * m[(ca, cb)];
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    let linm = &data.lin * m;
    let pqm = &data.p * &vmap.q_pin * m;
    let mut g = DVector::zeros(d);
    for (v, &(r, c)) in vmap.vars.iter().enumerate() {
        g[v] = linm[(r, c)] + 2.0 * pqm[(r, c)];
    }
    // Pinned rows also pay fixed cost: their quadratic self-term and
    // linear term move into the constant.
    let pin_quad = pqm.iter().zip(vmap.q_pin.iter()).map(|(a, b)| a * b).sum::<f64>();
    let pin_lin = linm.iter().zip(vmap.q_pin.iter()).map(|(a, b)| a * b).sum::<f64>();
    MasterObjective { h, g, constant: data.constant + pin_quad + pin_lin }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Line;
    use crate::scenario::{
        DisturbanceModel, LoadSpec, PvLaw, PvSpec, ScenarioSpec, StorageSpec,
    };
    use approx::assert_relative_eq;

    fn two_bus_case() -> ScenarioSpec {
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
            load_band: (0.8, 1.2),
            pv_law: PvLaw::Uniform,
        }
    }

    #[test]
    fn master_objective_matches_direct_expected_cost() {
        let (net, res, dm) = two_bus_case().build().unwrap();
        let lifted = crate::assembly::build_lifted_system(&net, &res).unwrap();
        let mm = crate::scenario::compute_moment_matrix(&dm);
        let head = crate::assembly::reactive_headroom(&res, &dm).unwrap();
        let pins = pins_for_synthesis(&res, &dm, &head);
        let vmap = build_var_map(&dm, &pins);
        let data = build_objective_data(&lifted, &mm, &res.initial_energy_mwh);
        let master = build_master_objective(&data, &mm, &vmap);

        let mut rng = crate::scenario::stream_rng(7, 0);
        use rand::Rng;
        let q = DVector::from_fn(vmap.len(), |_, _| rng.gen_range(-1.0..1.0));
        let reduced = 0.5 * q.dot(&(&master.h * &q)) + master.g.dot(&q) + master.constant;
        let direct = objective_value(&data, &mm, &vmap.assemble(&q));
        assert_relative_eq!(reduced, direct, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn expected_cost_matches_sample_average() {
        // The quadratic-in-xi cost functional evaluated through moments
        // must agree with a Monte Carlo average of per-sample costs.
        let (net, res, dm) = two_bus_case().build().unwrap();
        let lifted = crate::assembly::build_lifted_system(&net, &res).unwrap();
        let mm = crate::scenario::compute_moment_matrix(&dm);
        let data = build_objective_data(&lifted, &mm, &res.initial_energy_mwh);
        let head = crate::assembly::reactive_headroom(&res, &dm).unwrap();
        let pins = pins_for_synthesis(&res, &dm, &head);
        let vmap = build_var_map(&dm, &pins);
        let mut rng = crate::scenario::stream_rng(13, 0);
        use rand::Rng;
        let q = vmap.assemble(&DVector::from_fn(vmap.len(), |_, _| rng.gen_range(-0.5..0.5)));

        let loss = &lifted.loss;
        let samples = 200_000;
        let mut acc = 0.0;
        for k in 0..samples {
            let xi = crate::scenario::sample_trajectory(&dm, 913 + k as u64);
            let u = &q * &xi;
            let flows = &loss.loss_u * &u + &loss.loss_xi * &xi;
            let quad: f64 =
                flows.iter().zip(loss.sigma.iter()).map(|(f, s)| s * f * f).sum();
            let x = &lifted.a_lift * &res.initial_energy_mwh + &lifted.b_lift * &u;
            acc += quad + lifted.terminal_cost.dot(&x);
        }
        let mc = acc / samples as f64;
        let exact = objective_value(&data, &mm, &q);
        assert_relative_eq!(mc, exact, max_relative = 2e-2);
    }

    #[test]
    fn pinning_removes_resourceless_rows_and_degenerate_columns() {
        let mut spec = two_bus_case();
        spec.load_band = (1.0, 1.0); // deterministic loads
        let (_, res, dm) = spec.build().unwrap();
        let head_mat = crate::assembly::reactive_headroom(&res, &dm).unwrap();
        let pins = pins_for_synthesis(&res, &dm, &head_mat);
        // Bus 1 has neither storage nor PV: both input rows pinned each period.
        assert_eq!(pins.pinned_count(), 4);
        let vmap = build_var_map(&dm, &pins);
        // Bus 2 keeps 2 rows x 2 periods. Deterministic load columns and
        // bus-2's zero-load columns drop; only the constant column and the
        // causal PV columns stay: period 0 rows see 2 columns, period 1
        // rows see 3.
        assert_eq!(vmap.len(), 2 * 2 + 2 * 3);
        for &(r, _) in &vmap.vars {
            assert!(vmap.live_u_row[r]);
        }
        // Round trip through assemble keeps pins.
        let q = DVector::from_element(vmap.len(), 0.25);
        let full = vmap.assemble(&q);
        assert_eq!(full[(0, 0)], 0.0); // bus-1 storage row pinned to p=0
        assert_eq!(full.ncols(), dm.dims.n_xi());
    }

    #[test]
    fn moment_regularity_detects_flat_random_coordinates() {
        let spec = two_bus_case();
        let (_, _, dm) = spec.build().unwrap();
        assert!(moment_regular(&dm));
        // Widen the support box beyond a deterministic marginal: the
        // widened coordinate spans an interval but has zero variance.
        let mut spec2 = two_bus_case();
        spec2.load_band = (1.0, 1.0);
        let (_, _, dm2) = spec2.build().unwrap();
        let (mut lo, mut hi) = match dm2.support() {
            crate::scenario::SupportSet::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => unreachable!(),
        };
        lo[0] -= 0.1;
        hi[0] += 0.1;
        let widened = DisturbanceModel::new(dm2.dims, dm2.marginals().to_vec())
            .unwrap()
            .with_box_support(lo, hi)
            .unwrap();
        assert!(!moment_regular(&widened));
    }
}
