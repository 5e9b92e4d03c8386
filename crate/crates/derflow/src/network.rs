//! Radial feeder topology and the linearized voltage model.
//!
//! The model keeps squared voltage magnitudes as the network state and
//! drops line-loss terms from the flow equations, which makes squared
//! voltages affine in the net bus injections:
//!
//! `v^2 = R p + X q + v0^2 * 1`
//!
//! where `R_ij` (`X_ij`) is twice the summed resistance (reactance) of the
//! lines shared by the root paths of buses `i` and `j`, and `p`, `q` are
//! net active/reactive injections (generation minus load) at buses `1..=n`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One line of the feeder, identified by the bus at its downstream end.
#[derive(Debug, Clone, Copy)]
pub struct Line {
    /// Downstream bus in `1..=n`.
    pub bus: usize,
    /// Upstream bus; `0` is the substation.
    pub parent: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// Validated radial feeder with substation voltage and service bounds.
#[derive(Debug, Clone)]
pub struct RadialNetwork {
    n: usize,
    parent: Vec<usize>,
    r_ohm: Vec<f64>,
    x_ohm: Vec<f64>,
    children: Vec<Vec<usize>>,
    /// Buses ordered so that every parent precedes its children.
    topo: Vec<usize>,
    v0_kv: f64,
    v_lo_kv2: f64,
    v_hi_kv2: f64,
}

impl RadialNetwork {
    /// Builds and validates a feeder.
    ///
    /// `lines` must contain exactly one entry per bus `1..=n` (in any
    /// order) and the parent pointers must form a tree rooted at bus 0.
    /// `v_lo_pu`/`v_hi_pu` are service bounds relative to `v0_kv`; they are
    /// converted to squared-kV bounds here, once.
    pub fn new(lines: &[Line], v0_kv: f64, v_lo_pu: f64, v_hi_pu: f64) -> Result<RadialNetwork> {
        let n = lines.len();
        if n == 0 {
            return Err(Error::Network("feeder needs at least one bus".into()));
        }
        if !(v0_kv > 0.0) {
            return Err(Error::Network(format!("substation voltage must be positive, got {v0_kv}")));
        }
        if !(0.0 < v_lo_pu && v_lo_pu < v_hi_pu) {
            return Err(Error::Network(format!(
                "voltage window must satisfy 0 < lower < upper, got [{v_lo_pu}, {v_hi_pu}]"
            )));
        }

        let mut parent = vec![usize::MAX; n];
        let mut r_ohm = vec![0.0; n];
        let mut x_ohm = vec![0.0; n];
        for line in lines {
            if line.bus == 0 || line.bus > n {
                return Err(Error::Network(format!(
                    "bus ids must cover 1..={n} exactly, got bus {}",
                    line.bus
                )));
            }
            if parent[line.bus - 1] != usize::MAX {
                return Err(Error::Network(format!("bus {} listed twice", line.bus)));
            }
            if line.parent > n {
                return Err(Error::Network(format!(
                    "bus {} has unknown parent {}",
                    line.bus, line.parent
                )));
            }
            if !(line.r_ohm > 0.0) || !(line.x_ohm > 0.0) {
                return Err(Error::Network(format!(
                    "line into bus {} must have positive impedance, got r={} x={}",
                    line.bus, line.r_ohm, line.x_ohm
                )));
            }
            parent[line.bus - 1] = line.parent;
            r_ohm[line.bus - 1] = line.r_ohm;
            x_ohm[line.bus - 1] = line.x_ohm;
        }

        let mut children = vec![Vec::new(); n + 1];
        for bus in 1..=n {
            children[parent[bus - 1]].push(bus);
        }
        // Reachability from the substation rules out cycles and orphans:
        // every bus has exactly one parent pointer, so the graph is a
        // forest plus possibly cycles, and cycles are never reached.
        let mut topo = Vec::with_capacity(n);
        let mut stack = children[0].clone();
        while let Some(bus) = stack.pop() {
            topo.push(bus);
            stack.extend_from_slice(&children[bus]);
        }
        if topo.len() != n {
            let missing: Vec<usize> =
                (1..=n).filter(|b| !topo.contains(b)).collect();
            return Err(Error::Network(format!(
                "buses {missing:?} are not connected to the substation (orphan or cycle)"
            )));
        }

        Ok(RadialNetwork {
            n,
            parent,
            r_ohm,
            x_ohm,
            children,
            topo,
            v0_kv,
            v_lo_kv2: (v_lo_pu * v0_kv).powi(2),
            v_hi_kv2: (v_hi_pu * v0_kv).powi(2),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn parent(&self, bus: usize) -> usize {
        self.parent[bus - 1]
    }

    /// Resistance of the line whose downstream end is `bus`.
    pub fn line_r(&self, bus: usize) -> f64 {
        self.r_ohm[bus - 1]
    }

    pub fn line_x(&self, bus: usize) -> f64 {
        self.x_ohm[bus - 1]
    }

    pub fn v0_kv(&self) -> f64 {
        self.v0_kv
    }

    /// Squared substation voltage, kV^2.
    pub fn v0_kv2(&self) -> f64 {
        self.v0_kv * self.v0_kv
    }

    pub fn v_lo_kv2(&self) -> f64 {
        self.v_lo_kv2
    }

    pub fn v_hi_kv2(&self) -> f64 {
        self.v_hi_kv2
    }

    /// Buses ordered parent-before-child.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// All buses in the subtree hanging off `bus`, including `bus` itself.
    pub fn subtree(&self, bus: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![bus];
        while let Some(b) = stack.pop() {
            out.push(b);
            stack.extend_from_slice(&self.children[b]);
        }
        out
    }

    /// Buses on the path from the substation to `bus`, excluding bus 0.
    /// Each entry doubles as the line id of the line above it.
    pub fn root_path(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut b = bus;
        while b != 0 {
            path.push(b);
            b = self.parent[b - 1];
        }
        path.reverse();
        path
    }
}

/// Dense voltage sensitivities of the linearized model.
#[derive(Debug, Clone)]
pub struct SensitivityMatrices {
    /// `n x n`, kV^2 per MW of net active injection.
    pub r: DMatrix<f64>,
    /// `n x n`, kV^2 per Mvar of net reactive injection.
    pub x: DMatrix<f64>,
}

/// Builds the squared-voltage sensitivity matrices.
///
/// Entry `(i, j)` is twice the impedance summed over the lines common to
/// the root paths of buses `i+1` and `j+1`; the diagonal is twice the full
/// root-path impedance, so both matrices are positive semidefinite with a
/// strictly positive diagonal.
pub fn build_rx(net: &RadialNetwork) -> SensitivityMatrices {
    let n = net.n();
    // on_path[b][k] marks line k on the root path of bus b; filling along
    // the topological order reuses the parent's row.
    let mut on_path = vec![vec![false; n + 1]; n + 1];
    for &bus in net.topo_order() {
        let parent = net.parent(bus);
        on_path[bus] = on_path[parent].clone();
        on_path[bus][bus] = true;
    }

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let mut rij = 0.0;
            let mut xij = 0.0;
            for k in 1..=n {
                if on_path[i][k] && on_path[j][k] {
                    rij += net.line_r(k);
                    xij += net.line_x(k);
                }
            }
            r[(i - 1, j - 1)] = 2.0 * rij;
            r[(j - 1, i - 1)] = 2.0 * rij;
            x[(i - 1, j - 1)] = 2.0 * xij;
            x[(j - 1, i - 1)] = 2.0 * xij;
        }
    }
    SensitivityMatrices { r, x }
}

/// Evaluates `v^2 = R p + X q + v0^2 * 1` for one period.
///
/// `p_inj`/`q_inj` are net injections at buses `1..=n` (generation minus
/// load), MW and Mvar; the result is squared bus voltages in kV^2.
pub fn voltage_squared(
    net: &RadialNetwork,
    sens: &SensitivityMatrices,
    p_inj: &DVector<f64>,
    q_inj: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = net.n();
    if p_inj.len() != n || q_inj.len() != n {
        return Err(Error::Dimension(format!(
            "injection vectors must have length {n}, got {} and {}",
            p_inj.len(),
            q_inj.len()
        )));
    }
    let mut v2 = &sens.r * p_inj + &sens.x * q_inj;
    v2.add_scalar_mut(net.v0_kv2());
    Ok(v2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform_path(n: usize, r: f64, x: f64) -> RadialNetwork {
        let lines: Vec<Line> = (1..=n)
            .map(|bus| Line { bus, parent: bus - 1, r_ohm: r, x_ohm: x })
            .collect();
        RadialNetwork::new(&lines, 12.0, 0.95, 1.05).unwrap()
    }

    #[test]
    fn two_bus_path_matches_hand_calc() {
        let net = uniform_path(2, 0.466, 0.733);
        let sens = build_rx(&net);
        assert_abs_diff_eq!(sens.r[(0, 0)], 0.932, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.r[(0, 1)], 0.932, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.r[(1, 0)], 0.932, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.r[(1, 1)], 1.864, epsilon = 1e-12);
        assert_abs_diff_eq!(sens.x[(1, 1)], 2.932, epsilon = 1e-12);
    }

    #[test]
    fn single_bus_diagonal() {
        let lines = [Line { bus: 1, parent: 0, r_ohm: 1.0, x_ohm: 2.0 }];
        let net = RadialNetwork::new(&lines, 10.0, 0.9, 1.1).unwrap();
        let sens = build_rx(&net);
        assert_abs_diff_eq!(sens.r[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sens.x[(0, 0)], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn star_has_no_cross_coupling() {
        let lines = [
            Line { bus: 1, parent: 0, r_ohm: 0.5, x_ohm: 0.7 },
            Line { bus: 2, parent: 0, r_ohm: 0.9, x_ohm: 1.1 },
        ];
        let net = RadialNetwork::new(&lines, 12.0, 0.95, 1.05).unwrap();
        let sens = build_rx(&net);
        assert_abs_diff_eq!(sens.r[(0, 1)], 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(sens.x[(1, 0)], 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(sens.r[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sens.r[(1, 1)], 1.8, epsilon = 1e-15);
    }

    #[test]
    fn voltage_rises_with_injection() {
        // Single 1-ohm line at 12 kV: 1 MW net injection adds 2 kV^2.
        let lines = [Line { bus: 1, parent: 0, r_ohm: 1.0, x_ohm: 1.0 }];
        let net = RadialNetwork::new(&lines, 12.0, 0.95, 1.05).unwrap();
        let sens = build_rx(&net);
        let v2 = voltage_squared(
            &net,
            &sens,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 0.0),
        )
        .unwrap();
        assert_abs_diff_eq!(v2[0], 146.0, epsilon = 1e-12);
    }

    #[test]
    fn per_unit_window_converts_once() {
        let net = uniform_path(3, 0.466, 0.733);
        assert_abs_diff_eq!(net.v0_kv2(), 144.0, epsilon = 0.0);
        assert_abs_diff_eq!(net.v_lo_kv2(), (0.95f64 * 12.0).powi(2), epsilon = 0.0);
        assert_abs_diff_eq!(net.v_hi_kv2(), (1.05f64 * 12.0).powi(2), epsilon = 0.0);
    }

    #[test]
    fn rejects_cycles_and_orphans() {
        // 1 -> 2 -> 1 cycle, disconnected from the substation.
        let lines = [
            Line { bus: 1, parent: 2, r_ohm: 0.1, x_ohm: 0.1 },
            Line { bus: 2, parent: 1, r_ohm: 0.1, x_ohm: 0.1 },
        ];
        assert!(RadialNetwork::new(&lines, 12.0, 0.95, 1.05).is_err());

        let lines = [
            Line { bus: 1, parent: 0, r_ohm: 0.1, x_ohm: 0.1 },
            Line { bus: 1, parent: 0, r_ohm: 0.1, x_ohm: 0.1 },
        ];
        assert!(RadialNetwork::new(&lines, 12.0, 0.95, 1.05).is_err());
    }

    #[test]
    fn rejects_nonpositive_impedance() {
        let lines = [Line { bus: 1, parent: 0, r_ohm: 0.0, x_ohm: 0.1 }];
        assert!(RadialNetwork::new(&lines, 12.0, 0.95, 1.05).is_err());
    }

    #[test]
    fn subtree_and_path_agree_with_topology() {
        // 0 - 1 - 2, plus 1 - 3 (fork at bus 1).
        let lines = [
            Line { bus: 1, parent: 0, r_ohm: 0.1, x_ohm: 0.1 },
            Line { bus: 2, parent: 1, r_ohm: 0.1, x_ohm: 0.1 },
            Line { bus: 3, parent: 1, r_ohm: 0.1, x_ohm: 0.1 },
        ];
        let net = RadialNetwork::new(&lines, 12.0, 0.95, 1.05).unwrap();
        let mut sub = net.subtree(1);
        sub.sort_unstable();
        assert_eq!(sub, vec![1, 2, 3]);
        assert_eq!(net.root_path(2), vec![1, 2]);
        assert_eq!(net.root_path(3), vec![1, 3]);
    }
}
