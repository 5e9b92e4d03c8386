//! Assembly of the finite-horizon decision problem.
//!
//! Stacks per-period storage dynamics, line-loss quadratics, and voltage
//! sensitivities into trajectory-level matrices, and emits the operating
//! constraints as dense triples `F_x x + F_u u + F_xi xi <= f` over the
//! state, input, and disturbance trajectories.
//!
//! Inverter capability is polyhedral here: the exact per-period feasible
//! set `{q : q^2 + a^2 <= s^2}` (with `a` the active power passed through)
//! is replaced either by an inscribed box (safe inner approximation, used
//! for synthesis) or by a circumscribed wedge (outer approximation, used
//! for the lower bound).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layout::{Dims, Family, InputKind, RowId, XiKind};
use crate::network::{build_rx, RadialNetwork};
use crate::scenario::{DisturbanceModel, ResourceSet};

/// Per-period state update `x(t+1) = x(t) + B u(t)`: discharging at
/// `p` MW for `delta_hours` removes `delta_hours * p` MWh; reactive
/// output does not move stored energy.
pub fn build_step_input_map(n: usize, delta_hours: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        b[(i, 2 * i)] = -delta_hours;
    }
    b
}

/// Trajectory-level maps `x = A x(0) + B u`.
///
/// Returns `(a_lift, b_lift)` with `a_lift` of size `n(T+1) x n` (stacked
/// identities) and `b_lift` strictly block lower triangular: block row `t`
/// holds the step map in block columns `0..t`.
pub fn build_lifting(dims: Dims, delta_hours: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, horizon) = (dims.n, dims.horizon);
    let step = build_step_input_map(n, delta_hours);
    let mut a = DMatrix::zeros(dims.n_x(), n);
    let mut b = DMatrix::zeros(dims.n_x(), dims.n_u());
    for t in 0..=horizon {
        for i in 0..n {
            a[(t * n + i, i)] = 1.0;
        }
        for s in 0..t {
            b.view_mut((t * n, s * 2 * n), (n, 2 * n)).copy_from(&step);
        }
    }
    (a, b)
}

/// Vector `c` with `c'x` = total stored energy at the end of the horizon.
pub fn terminal_energy_selector(dims: Dims) -> DVector<f64> {
    let mut c = DVector::zeros(dims.n_x());
    for i in 0..dims.n {
        c[dims.n * dims.horizon + i] = 1.0;
    }
    c
}

/// Branch-flow and loss maps.
///
/// Row `2(j-1)` / `2(j-1)+1` of each period block carries the active /
/// reactive flow on the line feeding bus `j`, as a linear function of the
/// inputs and disturbances in that period (all consumption downstream of
/// the line, minus all controlled and PV injection). The weight vector
/// holds `r_j / v0^2` on both rows, so that
/// `flow' diag(weights) flow` is the total resistive loss in MW.
pub struct LossMaps {
    /// `2nT x 2nT`.
    pub loss_u: DMatrix<f64>,
    /// `2nT x (1 + 3nT)`; the leading constant column is zero.
    pub loss_xi: DMatrix<f64>,
    /// Diagonal of the loss weighting, length `2nT`.
    pub sigma: DVector<f64>,
}

pub fn build_loss_maps(net: &RadialNetwork, dims: Dims) -> LossMaps {
    let n = net.n();
    let horizon = dims.horizon;
    let mut lu0 = DMatrix::zeros(2 * n, 2 * n);
    let mut lxi0 = DMatrix::zeros(2 * n, 3 * n);
    let mut sigma0 = DVector::zeros(2 * n);
    for j in 1..=n {
        let prow = 2 * (j - 1);
        let qrow = prow + 1;
        let w = net.line_r(j) / net.v0_kv2();
        sigma0[prow] = w;
        sigma0[qrow] = w;
        for k in net.subtree(j) {
            let kc = k - 1;
            // Flow toward bus j serves every bus below it: loads add,
            // storage discharge and PV production offset.
            lu0[(prow, 2 * kc)] = -1.0;
            lu0[(qrow, 2 * kc + 1)] = -1.0;
            lxi0[(prow, 3 * kc)] = 1.0;
            lxi0[(prow, 3 * kc + 2)] = -1.0;
            lxi0[(qrow, 3 * kc + 1)] = 1.0;
        }
    }
    let mut loss_u = DMatrix::zeros(2 * n * horizon, dims.n_u());
    let mut loss_xi = DMatrix::zeros(2 * n * horizon, dims.n_xi());
    let mut sigma = DVector::zeros(2 * n * horizon);
    for t in 0..horizon {
        loss_u.view_mut((2 * n * t, 2 * n * t), (2 * n, 2 * n)).copy_from(&lu0);
        loss_xi.view_mut((2 * n * t, 1 + 3 * n * t), (2 * n, 3 * n)).copy_from(&lxi0);
        sigma.rows_mut(2 * n * t, 2 * n).copy_from(&sigma0);
    }
    LossMaps { loss_u, loss_xi, sigma }
}

/// Per-period squared-voltage response, tiled over the horizon.
///
/// `v^2(t) = volt_u u(t) + volt_xi xi(t) + v0^2 * 1` per period; returned
/// matrices act on full trajectories (`nT x 2nT` and `nT x (1+3nT)`).
pub struct VoltageMaps {
    pub volt_u: DMatrix<f64>,
    pub volt_xi: DMatrix<f64>,
}

pub fn build_voltage_maps(net: &RadialNetwork, dims: Dims) -> VoltageMaps {
    let n = net.n();
    let horizon = dims.horizon;
    let sens = build_rx(net);
    let mut vu0 = DMatrix::zeros(n, 2 * n);
    let mut vxi0 = DMatrix::zeros(n, 3 * n);
    for i in 0..n {
        for k in 0..n {
            let (r, x) = (sens.r[(i, k)], sens.x[(i, k)]);
            // Net active injection at k: storage discharge plus PV
            // production minus load; net reactive: inverter minus load.
            vu0[(i, 2 * k)] = r;
            vu0[(i, 2 * k + 1)] = x;
            vxi0[(i, 3 * k)] = -r;
            vxi0[(i, 3 * k + 1)] = -x;
            vxi0[(i, 3 * k + 2)] = r;
        }
    }
    let mut volt_u = DMatrix::zeros(n * horizon, dims.n_u());
    let mut volt_xi = DMatrix::zeros(n * horizon, dims.n_xi());
    for t in 0..horizon {
        volt_u.view_mut((n * t, 2 * n * t), (n, 2 * n)).copy_from(&vu0);
        volt_xi.view_mut((n * t, 1 + 3 * n * t), (n, 3 * n)).copy_from(&vxi0);
    }
    VoltageMaps { volt_u, volt_xi }
}

/// Everything the cost function needs, in trajectory coordinates.
pub struct LiftedSystem {
    pub dims: Dims,
    pub delta_hours: f64,
    pub a_lift: DMatrix<f64>,
    pub b_lift: DMatrix<f64>,
    pub terminal_cost: DVector<f64>,
    pub loss: LossMaps,
}

pub fn build_lifted_system(net: &RadialNetwork, res: &ResourceSet) -> Result<LiftedSystem> {
    if res.dims.n != net.n() {
        return Err(Error::Dimension(format!(
            "resource set covers {} buses but the network has {}",
            res.dims.n,
            net.n()
        )));
    }
    let dims = res.dims;
    let (a_lift, b_lift) = build_lifting(dims, res.period_hours);
    Ok(LiftedSystem {
        dims,
        delta_hours: res.period_hours,
        a_lift,
        b_lift,
        terminal_cost: terminal_energy_selector(dims),
        loss: build_loss_maps(net, dims),
    })
}

/// Largest reactive output each inverter can guarantee in each period:
/// `sqrt(s^2 - a_max^2)` where `a_max` is the worst-case available PV
/// power over the support set. Fails if some inverter is too small to
/// pass its worst-case active power through.
///
/// Returned matrix is `n x T` (bus-major rows).
pub fn reactive_headroom(res: &ResourceSet, dm: &DisturbanceModel) -> Result<DMatrix<f64>> {
    let dims = res.dims;
    let mut head = DMatrix::zeros(dims.n, dims.horizon);
    for t in 0..dims.horizon {
        for bus in 1..=dims.n {
            let s = res.apparent_capacity_mva[bus - 1];
            let a_max = dm.coordinate_max(dims.xi_index(t, bus, XiKind::PvAvailable) - 1)?;
            if a_max > s + 1e-9 {
                return Err(Error::SupplyExceedsCapacity { bus, peak: a_max, capacity: s });
            }
            head[(bus - 1, t)] = (s * s - a_max * a_max).max(0.0).sqrt();
        }
    }
    Ok(head)
}

/// Which polyhedral stand-in for the inverter capability disk to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactiveApproximation {
    /// Inscribed box `|q| <= sqrt(s^2 - a_max^2)`: every policy feasible
    /// for it is feasible for the true disk.
    Inner,
    /// Circumscribed wedge `|q| + a <= sqrt(2) s`: contains the true disk,
    /// so optimizing over it can only lower the optimal value.
    Outer,
}

/// Operating constraints as dense triples over trajectories:
/// `f_x x + f_u u + f_xi xi <= rhs`, row for row.
///
/// Rows follow the canonical family order (voltage upper/lower, energy
/// upper/lower, storage power upper/lower, reactive upper/lower), each
/// family period-major and bus-minor; see the layout module.
pub struct ConstraintSet {
    pub dims: Dims,
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub f_xi: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

pub fn build_constraints(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    approx: ReactiveApproximation,
) -> Result<ConstraintSet> {
    let dims = res.dims;
    if dims.n != net.n() {
        return Err(Error::Dimension(format!(
            "resource set covers {} buses but the network has {}",
            dims.n,
            net.n()
        )));
    }
    if dm.dims != dims {
        return Err(Error::Dimension(
            "disturbance model and resource set disagree on problem size".into(),
        ));
    }
    let (n, horizon) = (dims.n, dims.horizon);
    let m = dims.n_rows();
    let volt = build_voltage_maps(net, dims);
    let head = match approx {
        ReactiveApproximation::Inner => Some(reactive_headroom(res, dm)?),
        ReactiveApproximation::Outer => None,
    };

    let mut f_x = DMatrix::zeros(m, dims.n_x());
    let mut f_u = DMatrix::zeros(m, dims.n_u());
    let mut f_xi = DMatrix::zeros(m, dims.n_xi());
    let mut rhs = DVector::zeros(m);

    for t in 0..horizon {
        for bus in 1..=n {
            let vrow = n * t + (bus - 1);
            let r_up = dims.row_index(RowId { family: Family::VoltageUpper, bus, t });
            f_u.row_mut(r_up).copy_from(&volt.volt_u.row(vrow));
            f_xi.row_mut(r_up).copy_from(&volt.volt_xi.row(vrow));
            rhs[r_up] = net.v_hi_kv2() - net.v0_kv2();

            let r_lo = dims.row_index(RowId { family: Family::VoltageLower, bus, t });
            f_u.row_mut(r_lo).copy_from(&(-volt.volt_u.row(vrow)));
            f_xi.row_mut(r_lo).copy_from(&(-volt.volt_xi.row(vrow)));
            rhs[r_lo] = net.v0_kv2() - net.v_lo_kv2();
        }
    }

    for t in 1..=horizon {
        for bus in 1..=n {
            let r_up = dims.row_index(RowId { family: Family::StateUpper, bus, t });
            f_x[(r_up, dims.x_index(t, bus))] = 1.0;
            rhs[r_up] = res.energy_capacity_mwh[bus - 1];

            let r_lo = dims.row_index(RowId { family: Family::StateLower, bus, t });
            f_x[(r_lo, dims.x_index(t, bus))] = -1.0;
            rhs[r_lo] = 0.0;
        }
    }

    for t in 0..horizon {
        for bus in 1..=n {
            let pcol = dims.u_index(t, bus, InputKind::StoragePower);
            let r_up = dims.row_index(RowId { family: Family::StoragePowerUpper, bus, t });
            f_u[(r_up, pcol)] = 1.0;
            rhs[r_up] = res.p_max_mw[bus - 1];

            let r_lo = dims.row_index(RowId { family: Family::StoragePowerLower, bus, t });
            f_u[(r_lo, pcol)] = -1.0;
            rhs[r_lo] = -res.p_min_mw[bus - 1];

            let qcol = dims.u_index(t, bus, InputKind::InverterReactive);
            let acol = dims.xi_index(t, bus, XiKind::PvAvailable);
            let r_qu = dims.row_index(RowId { family: Family::ReactiveUpper, bus, t });
            let r_ql = dims.row_index(RowId { family: Family::ReactiveLower, bus, t });
            match (&head, approx) {
                (Some(h), ReactiveApproximation::Inner) => {
                    f_u[(r_qu, qcol)] = 1.0;
                    rhs[r_qu] = h[(bus - 1, t)];
                    f_u[(r_ql, qcol)] = -1.0;
                    rhs[r_ql] = h[(bus - 1, t)];
                }
                (_, ReactiveApproximation::Outer) => {
                    let cap = std::f64::consts::SQRT_2 * res.apparent_capacity_mva[bus - 1];
                    f_u[(r_qu, qcol)] = 1.0;
                    f_xi[(r_qu, acol)] = 1.0;
                    rhs[r_qu] = cap;
                    f_u[(r_ql, qcol)] = -1.0;
                    f_xi[(r_ql, acol)] = 1.0;
                    rhs[r_ql] = cap;
                }
                (None, ReactiveApproximation::Inner) => unreachable!(),
            }
        }
    }

    Ok(ConstraintSet { dims, f_x, f_u, f_xi, rhs })
}

/// Information structure of the decentralized affine policy: entry
/// `(row, col)` is true when the gain from disturbance coordinate `col`
/// to input coordinate `row` may be nonzero. Each input may use the
/// constant coordinate and its own bus's disturbances up to and including
/// the current period.
pub fn build_policy_mask(dims: Dims) -> DMatrix<bool> {
    let mut mask = DMatrix::from_element(dims.n_u(), dims.n_xi(), false);
    for t in 0..dims.horizon {
        for bus in 1..=dims.n {
            for kind in [InputKind::StoragePower, InputKind::InverterReactive] {
                let row = dims.u_index(t, bus, kind);
                mask[(row, 0)] = true;
                for s in 0..=t {
                    for xk in XiKind::all() {
                        mask[(row, dims.xi_index(s, bus, xk))] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Number of free scalars in the masked policy.
pub fn policy_free_count(dims: Dims) -> usize {
    // Per subsystem and period t: two rows, each with 1 + 3(t+1) columns.
    (0..dims.horizon).map(|t| dims.n * 2 * (1 + 3 * (t + 1))).sum()
}

/// Rewrites the box `lo <= xi_{1..} <= hi` as rows `W xi >= 0` over the
/// full disturbance vector (constant coordinate first). Degenerate
/// coordinates contribute their two opposing rows as well, pinning them
/// to the common value.
pub fn box_to_polytope(dims: Dims, lo: &DVector<f64>, hi: &DVector<f64>) -> DMatrix<f64> {
    let k = lo.len();
    let mut w = DMatrix::zeros(2 * k, dims.n_xi());
    for j in 0..k {
        w[(2 * j, 0)] = -lo[j];
        w[(2 * j, j + 1)] = 1.0;
        w[(2 * j + 1, 0)] = hi[j];
        w[(2 * j + 1, j + 1)] = -1.0;
    }
    w
}
