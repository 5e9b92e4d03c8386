//! Index maps for stacked trajectory vectors and constraint rows.
//!
//! Every lifted object in the crate agrees on these layouts:
//!
//! * state `x = (x(0), ..., x(T))`, length `n*(T+1)`;
//! * input `u = (u(0), ..., u(T-1))`, length `2nT`, where
//!   `u_i(t) = (storage power p_i(t), inverter reactive q_i(t))`;
//! * disturbance `xi = (1, xi(0), ..., xi(T-1))`, length `1 + 3nT`, where
//!   `xi_i(t) = (active load, reactive load, available PV power)` and the
//!   leading coordinate is the constant one that carries affine terms.
//!
//! Within a period both `u(t)` and `xi(t)` are bus-major. Constraint rows
//! come in eight families of `nT` rows each, ordered period-major then
//! bus-major within a family.

/// Input components per bus, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    StoragePower,
    InverterReactive,
}

impl InputKind {
    pub fn offset(self) -> usize {
        match self {
            InputKind::StoragePower => 0,
            InputKind::InverterReactive => 1,
        }
    }
}

/// Disturbance components per bus, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiKind {
    LoadActive,
    LoadReactive,
    PvAvailable,
}

impl XiKind {
    pub fn offset(self) -> usize {
        match self {
            XiKind::LoadActive => 0,
            XiKind::LoadReactive => 1,
            XiKind::PvAvailable => 2,
        }
    }

    pub fn all() -> [XiKind; 3] {
        [XiKind::LoadActive, XiKind::LoadReactive, XiKind::PvAvailable]
    }
}

/// Constraint-row families, in row-block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    VoltageUpper,
    VoltageLower,
    StateUpper,
    StateLower,
    StoragePowerUpper,
    StoragePowerLower,
    ReactiveUpper,
    ReactiveLower,
}

impl Family {
    pub fn all() -> [Family; 8] {
        [
            Family::VoltageUpper,
            Family::VoltageLower,
            Family::StateUpper,
            Family::StateLower,
            Family::StoragePowerUpper,
            Family::StoragePowerLower,
            Family::ReactiveUpper,
            Family::ReactiveLower,
        ]
    }

    pub fn index(self) -> usize {
        match self {
            Family::VoltageUpper => 0,
            Family::VoltageLower => 1,
            Family::StateUpper => 2,
            Family::StateLower => 3,
            Family::StoragePowerUpper => 4,
            Family::StoragePowerLower => 5,
            Family::ReactiveUpper => 6,
            Family::ReactiveLower => 7,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Family::VoltageUpper => "voltage upper",
            Family::VoltageLower => "voltage lower",
            Family::StateUpper => "stored energy upper",
            Family::StateLower => "stored energy lower",
            Family::StoragePowerUpper => "storage power upper",
            Family::StoragePowerLower => "storage power lower",
            Family::ReactiveUpper => "inverter reactive upper",
            Family::ReactiveLower => "inverter reactive lower",
        }
    }
}

/// Identifies one scalar constraint row.
///
/// `t` is the input/disturbance period for voltage and input families and
/// the state period (`1..=T`) for the stored-energy families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowId {
    pub family: Family,
    pub bus: usize,
    pub t: usize,
}

/// Problem dimensions: `n` controlled buses, `horizon` planning periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn new(n: usize, horizon: usize) -> Dims {
        Dims { n, horizon }
    }

    /// Stacked state length `n*(T+1)`.
    pub fn n_x(&self) -> usize {
        self.n * (self.horizon + 1)
    }

    /// Stacked input length `2nT`.
    pub fn n_u(&self) -> usize {
        2 * self.n * self.horizon
    }

    /// Stacked disturbance length `1 + 3nT` (leading constant coordinate).
    pub fn n_xi(&self) -> usize {
        1 + 3 * self.n * self.horizon
    }

    /// Total constraint rows `8nT`.
    pub fn n_rows(&self) -> usize {
        8 * self.n * self.horizon
    }

    /// Index of `x_bus(t)`, `t` in `0..=T`, `bus` in `1..=n`.
    pub fn x_index(&self, t: usize, bus: usize) -> usize {
        debug_assert!(t <= self.horizon && bus >= 1 && bus <= self.n);
        t * self.n + (bus - 1)
    }

    /// Index of an input component at period `t` in `0..T`.
    pub fn u_index(&self, t: usize, bus: usize, kind: InputKind) -> usize {
        debug_assert!(t < self.horizon && bus >= 1 && bus <= self.n);
        t * 2 * self.n + 2 * (bus - 1) + kind.offset()
    }

    /// Index of a disturbance component at period `t` in `0..T`; the
    /// constant coordinate sits at index 0.
    pub fn xi_index(&self, t: usize, bus: usize, kind: XiKind) -> usize {
        debug_assert!(t < self.horizon && bus >= 1 && bus <= self.n);
        1 + t * 3 * self.n + 3 * (bus - 1) + kind.offset()
    }

    /// Inverse of [`Dims::xi_index`] for non-constant coordinates.
    pub fn xi_coord(&self, index: usize) -> (usize, usize, XiKind) {
        debug_assert!(index >= 1 && index < self.n_xi());
        let raw = index - 1;
        let t = raw / (3 * self.n);
        let within = raw % (3 * self.n);
        let bus = within / 3 + 1;
        let kind = match within % 3 {
            0 => XiKind::LoadActive,
            1 => XiKind::LoadReactive,
            _ => XiKind::PvAvailable,
        };
        (t, bus, kind)
    }

    /// Row index of a constraint; see [`RowId`] for the meaning of `t`.
    pub fn row_index(&self, id: RowId) -> usize {
        let nt = self.n * self.horizon;
        let t_slot = match id.family {
            Family::StateUpper | Family::StateLower => {
                debug_assert!(id.t >= 1 && id.t <= self.horizon);
                id.t - 1
            }
            _ => {
                debug_assert!(id.t < self.horizon);
                id.t
            }
        };
        id.family.index() * nt + t_slot * self.n + (id.bus - 1)
    }

    /// Inverse of [`Dims::row_index`].
    pub fn row_id(&self, row: usize) -> RowId {
        let nt = self.n * self.horizon;
        debug_assert!(row < self.n_rows());
        let family = Family::all()[row / nt];
        let within = row % nt;
        let t_slot = within / self.n;
        let bus = within % self.n + 1;
        let t = match family {
            Family::StateUpper | Family::StateLower => t_slot + 1,
            _ => t_slot,
        };
        RowId { family, bus, t }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_lengths() {
        let d = Dims::new(3, 4);
        assert_eq!(d.n_x(), 15);
        assert_eq!(d.n_u(), 24);
        assert_eq!(d.n_xi(), 37);
        assert_eq!(d.n_rows(), 96);
    }

    #[test]
    fn xi_index_round_trip() {
        let d = Dims::new(4, 6);
        for t in 0..6 {
            for bus in 1..=4 {
                for kind in XiKind::all() {
                    let idx = d.xi_index(t, bus, kind);
                    assert_eq!(d.xi_coord(idx), (t, bus, kind));
                }
            }
        }
    }

    #[test]
    fn row_index_round_trip() {
        let d = Dims::new(2, 3);
        for row in 0..d.n_rows() {
            assert_eq!(d.row_index(d.row_id(row)), row);
        }
    }

    #[test]
    fn family_blocks_are_contiguous() {
        let d = Dims::new(2, 3);
        let first_lower = d.row_index(RowId { family: Family::VoltageLower, bus: 1, t: 0 });
        assert_eq!(first_lower, d.n * d.horizon);
        let first_state = d.row_index(RowId { family: Family::StateUpper, bus: 1, t: 1 });
        assert_eq!(first_state, 2 * d.n * d.horizon);
    }
}
