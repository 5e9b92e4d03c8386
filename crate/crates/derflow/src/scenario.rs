//! Resources, disturbance laws, moments, and scenario assembly.
//!
//! A scenario couples a feeder with per-bus storage/inverter hardware and
//! a disturbance model: one marginal law per bus, period, and component
//! (active load, reactive load, available PV power), plus a support set
//! over which constraints are enforced robustly. Marginals are mutually
//! independent; the support defaults to the exact box hull of the
//! marginals and may be replaced by a bounded polytope.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::layout::{Dims, XiKind};
use crate::network::{Line, RadialNetwork};

// ---------------------------------------------------------------------
// resources
// ---------------------------------------------------------------------

/// Storage unit at one bus.
#[derive(Debug, Clone, Copy)]
pub struct StorageSpec {
    pub bus: usize,
    /// Usable energy capacity, MWh.
    pub capacity_mwh: f64,
    /// Discharge power bounds, MW (negative = charging).
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    /// Stored energy at the start of the horizon, MWh.
    pub initial_mwh: f64,
}

/// PV unit and its inverter at one bus.
#[derive(Debug, Clone, Copy)]
pub struct PvSpec {
    pub bus: usize,
    /// Nameplate active power capacity, MW.
    pub power_capacity_mw: f64,
    /// Inverter apparent power capacity, MVA.
    pub apparent_capacity_mva: f64,
}

/// Uncontrolled demand at one bus; scales the daily load shape.
#[derive(Debug, Clone, Copy)]
pub struct LoadSpec {
    pub bus: usize,
    /// Active power at the daily peak, MW.
    pub peak_mw: f64,
    /// Reactive demand is `peak * tan(acos(power_factor))` scaled by the
    /// same shape.
    pub power_factor: f64,
}

/// Dense per-bus resource bounds used by synthesis and simulation.
///
/// Buses without storage carry zero capacity and a degenerate `[0, 0]`
/// power window; buses without PV carry zero apparent capacity.
#[derive(Debug, Clone)]
pub struct ResourceSet {
    pub dims: Dims,
    /// Period length, hours.
    pub period_hours: f64,
    pub energy_capacity_mwh: DVector<f64>,
    pub p_min_mw: DVector<f64>,
    pub p_max_mw: DVector<f64>,
    pub initial_energy_mwh: DVector<f64>,
    pub apparent_capacity_mva: DVector<f64>,
    pub pv_power_capacity_mw: DVector<f64>,
}

impl ResourceSet {
    pub fn new(
        dims: Dims,
        period_hours: f64,
        storages: &[StorageSpec],
        pvs: &[PvSpec],
    ) -> Result<ResourceSet> {
        let n = dims.n;
        if !(period_hours > 0.0) {
            return Err(Error::Scenario(format!(
                "period length must be positive, got {period_hours}"
            )));
        }
        let mut b = DVector::zeros(n);
        let mut p_min = DVector::zeros(n);
        let mut p_max = DVector::zeros(n);
        let mut x0 = DVector::zeros(n);
        let mut s = DVector::zeros(n);
        let mut theta = DVector::zeros(n);
        let mut seen_storage = vec![false; n];
        let mut seen_pv = vec![false; n];

        for st in storages {
            if st.bus == 0 || st.bus > n {
                return Err(Error::Scenario(format!("storage at unknown bus {}", st.bus)));
            }
            if seen_storage[st.bus - 1] {
                return Err(Error::Scenario(format!("two storage units at bus {}", st.bus)));
            }
            seen_storage[st.bus - 1] = true;
            if !(st.capacity_mwh >= 0.0) {
                return Err(Error::Scenario(format!(
                    "storage capacity at bus {} must be nonnegative",
                    st.bus
                )));
            }
            if !(st.p_min_mw <= st.p_max_mw) {
                return Err(Error::Scenario(format!(
                    "storage power window at bus {} is empty: [{}, {}]",
                    st.bus, st.p_min_mw, st.p_max_mw
                )));
            }
            if !(0.0 <= st.initial_mwh && st.initial_mwh <= st.capacity_mwh) {
                return Err(Error::Scenario(format!(
                    "initial energy at bus {} outside [0, capacity]",
                    st.bus
                )));
            }
            b[st.bus - 1] = st.capacity_mwh;
            p_min[st.bus - 1] = st.p_min_mw;
            p_max[st.bus - 1] = st.p_max_mw;
            x0[st.bus - 1] = st.initial_mwh;
        }

        for pv in pvs {
            if pv.bus == 0 || pv.bus > n {
                return Err(Error::Scenario(format!("PV at unknown bus {}", pv.bus)));
            }
            if seen_pv[pv.bus - 1] {
                return Err(Error::Scenario(format!("two PV units at bus {}", pv.bus)));
            }
            seen_pv[pv.bus - 1] = true;
            if !(pv.power_capacity_mw >= 0.0) || !(pv.apparent_capacity_mva >= 0.0) {
                return Err(Error::Scenario(format!(
                    "PV capacities at bus {} must be nonnegative",
                    pv.bus
                )));
            }
            s[pv.bus - 1] = pv.apparent_capacity_mva;
            theta[pv.bus - 1] = pv.power_capacity_mw;
        }

        Ok(ResourceSet {
            dims,
            period_hours,
            energy_capacity_mwh: b,
            p_min_mw: p_min,
            p_max_mw: p_max,
            initial_energy_mwh: x0,
            apparent_capacity_mva: s,
            pv_power_capacity_mw: theta,
        })
    }
}

// ---------------------------------------------------------------------
// marginal laws
// ---------------------------------------------------------------------

/// Marginal law of one scalar disturbance coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    PointMass { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Gaussian restricted to `[lo, hi]` and renormalized.
    TruncatedGaussian { center: f64, scale: f64, lo: f64, hi: f64 },
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Marginal::PointMass { value } => {
                if !value.is_finite() {
                    return Err(Error::Scenario("point mass must be finite".into()));
                }
            }
            Marginal::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Scenario(format!(
                        "uniform law needs finite lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
            Marginal::TruncatedGaussian { center, scale, lo, hi } => {
                if !(scale > 0.0) || !center.is_finite() {
                    return Err(Error::Scenario(format!(
                        "truncated gaussian needs positive scale, got {scale}"
                    )));
                }
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Scenario(format!(
                        "truncated gaussian needs finite lo < hi, got [{lo}, {hi}]"
                    )));
                }
                let z = self.truncation_mass();
                if z < 1e-12 {
                    return Err(Error::Scenario(format!(
                        "truncation [{lo}, {hi}] keeps negligible mass ({z:.3e}) of the gaussian"
                    )));
                }
            }
        }
        Ok(())
    }

    fn truncation_mass(&self) -> f64 {
        match *self {
            Marginal::TruncatedGaussian { center, scale, lo, hi } => {
                let norm = Normal::new(0.0, 1.0).expect("unit normal");
                norm.cdf((hi - center) / scale) - norm.cdf((lo - center) / scale)
            }
            _ => 1.0,
        }
    }

    /// Smallest closed interval carrying all mass.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Marginal::PointMass { value } => (value, value),
            Marginal::Uniform { lo, hi } => (lo, hi),
            Marginal::TruncatedGaussian { lo, hi, .. } => (lo, hi),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::PointMass { value } => value,
            Marginal::Uniform { lo, hi } => 0.5 * (lo + hi),
            Marginal::TruncatedGaussian { center, scale, lo, hi } => {
                let a = (lo - center) / scale;
                let b = (hi - center) / scale;
                let z = self.truncation_mass();
                center + scale * (std_normal_pdf(a) - std_normal_pdf(b)) / z
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::PointMass { .. } => 0.0,
            Marginal::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            Marginal::TruncatedGaussian { center, scale, lo, hi } => {
                let a = (lo - center) / scale;
                let b = (hi - center) / scale;
                let z = self.truncation_mass();
                let ratio = (std_normal_pdf(a) - std_normal_pdf(b)) / z;
                scale
                    * scale
                    * (1.0 + (a * std_normal_pdf(a) - b * std_normal_pdf(b)) / z - ratio * ratio)
            }
        }
    }

    /// Draws one value; consumes at most one uniform variate so replay is
    /// insensitive to the law at other coordinates.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Marginal::PointMass { value } => value,
            Marginal::Uniform { lo, hi } => {
                let u: f64 = rng.gen();
                lo + u * (hi - lo)
            }
            Marginal::TruncatedGaussian { center, scale, lo, hi } => {
                let norm = Normal::new(0.0, 1.0).expect("unit normal");
                let a = norm.cdf((lo - center) / scale);
                let b = norm.cdf((hi - center) / scale);
                let u: f64 = rng.gen();
                let p = (a + u * (b - a)).clamp(1e-15, 1.0 - 1e-15);
                (center + scale * norm.inverse_cdf(p)).clamp(lo, hi)
            }
        }
    }
}

// ---------------------------------------------------------------------
// support sets
// ---------------------------------------------------------------------

/// Set over which constraints are enforced for every realization.
///
/// Vectors/columns range over the `3nT` non-constant coordinates except in
/// the polytope case, whose rows are written against the full disturbance
/// vector (leading constant coordinate included) as `W xi >= 0`.
#[derive(Debug, Clone)]
pub enum SupportSet {
    Box { lo: DVector<f64>, hi: DVector<f64> },
    Polytope { w: DMatrix<f64> },
}

impl SupportSet {
    /// Half-width of coordinate `coord` (0-based, constant excluded); only
    /// meaningful for boxes.
    pub fn is_box(&self) -> bool {
        matches!(self, SupportSet::Box { .. })
    }
}

// ---------------------------------------------------------------------
// disturbance model
// ---------------------------------------------------------------------

/// Per-coordinate marginal laws plus the support set.
#[derive(Debug, Clone)]
pub struct DisturbanceModel {
    pub dims: Dims,
    /// Length `3nT`; index `xi_index(t, bus, kind) - 1`.
    marginals: Vec<Marginal>,
    support: SupportSet,
    independent: bool,
}

impl DisturbanceModel {
    /// Builds a model with mutually independent marginals and the exact
    /// box hull of their supports as the support set.
    pub fn new(dims: Dims, marginals: Vec<Marginal>) -> Result<DisturbanceModel> {
        let expect = 3 * dims.n * dims.horizon;
        if marginals.len() != expect {
            return Err(Error::Dimension(format!(
                "need {expect} marginals (3 per bus per period), got {}",
                marginals.len()
            )));
        }
        for (k, m) in marginals.iter().enumerate() {
            m.validate().map_err(|e| {
                let (t, bus, kind) = dims.xi_coord(k + 1);
                Error::Scenario(format!("coordinate (t={t}, bus={bus}, {kind:?}): {e}"))
            })?;
        }
        let lo = DVector::from_iterator(expect, marginals.iter().map(|m| m.support().0));
        let hi = DVector::from_iterator(expect, marginals.iter().map(|m| m.support().1));
        Ok(DisturbanceModel {
            dims,
            marginals,
            support: SupportSet::Box { lo, hi },
            independent: true,
        })
    }

    /// Replaces the support with a wider box; it must contain every
    /// marginal's support.
    pub fn with_box_support(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        let k = self.marginals.len();
        if lo.len() != k || hi.len() != k {
            return Err(Error::Dimension(format!(
                "support box must have {k} coordinates, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (j, m) in self.marginals.iter().enumerate() {
            let (a, b) = m.support();
            if lo[j] > a + 1e-12 || hi[j] < b - 1e-12 {
                return Err(Error::Scenario(format!(
                    "declared box [{}, {}] does not contain the law's support [{a}, {b}] \
                     at coordinate {j}",
                    lo[j], hi[j]
                )));
            }
        }
        self.support = SupportSet::Box { lo, hi };
        Ok(self)
    }

    /// Replaces the support with a polytope `{xi : W xi >= 0, xi_0 = 1}`;
    /// rows are over the full disturbance vector. The marginal box hull
    /// must sit inside it, which is checked exactly by vertex enumeration
    /// when few coordinates are non-degenerate and by hull-corner sampling
    /// otherwise.
    pub fn with_polytope_support(mut self, w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() != self.dims.n_xi() {
            return Err(Error::Dimension(format!(
                "polytope rows must have {} columns, got {}",
                self.dims.n_xi(),
                w.ncols()
            )));
        }
        let lo: Vec<f64> = self.marginals.iter().map(|m| m.support().0).collect();
        let hi: Vec<f64> = self.marginals.iter().map(|m| m.support().1).collect();
        let free: Vec<usize> =
            (0..lo.len()).filter(|&j| hi[j] > lo[j]).collect();
        let exact = free.len() <= 12;
        let corners: usize = if exact { 1usize << free.len() } else { 1024 };
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut xi = DVector::from_element(self.dims.n_xi(), 0.0);
        for c in 0..corners {
            xi[0] = 1.0;
            for j in 0..lo.len() {
                xi[j + 1] = lo[j];
            }
            for (bit, &j) in free.iter().enumerate() {
                let high = if exact { (c >> bit) & 1 == 1 } else { rng.gen::<bool>() };
                xi[j + 1] = if high { hi[j] } else { lo[j] };
            }
            let slack = &w * &xi;
            if slack.min() < -1e-9 {
                return Err(Error::Scenario(
                    "declared polytope does not contain the marginal box hull".into(),
                ));
            }
        }
        self.support = SupportSet::Polytope { w };
        Ok(self)
    }

    /// Marks the model as carrying cross-coordinate correlation. The
    /// sampler still draws marginals independently; the flag exists so the
    /// lower-bound certification refuses such models.
    pub fn with_correlation_flag(mut self) -> Self {
        self.independent = false;
        self
    }

    pub fn marginal(&self, t: usize, bus: usize, kind: XiKind) -> &Marginal {
        &self.marginals[self.dims.xi_index(t, bus, kind) - 1]
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn support(&self) -> &SupportSet {
        &self.support
    }

    /// Mean vector of the full disturbance (constant coordinate first).
    pub fn mean_vector(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.dims.n_xi());
        mu[0] = 1.0;
        for (j, m) in self.marginals.iter().enumerate() {
            mu[j + 1] = m.mean();
        }
        mu
    }

    /// Per-coordinate variances (constant coordinate first, always 0).
    pub fn variance_vector(&self) -> DVector<f64> {
        let mut var = DVector::zeros(self.dims.n_xi());
        for (j, m) in self.marginals.iter().enumerate() {
            var[j + 1] = m.variance();
        }
        var
    }

    /// Tightest per-coordinate interval covering the support set (box:
    /// the box itself; polytope: the marginal hull, which the polytope
    /// contains by construction).
    pub fn coordinate_interval(&self, coord: usize) -> (f64, f64) {
        match &self.support {
            SupportSet::Box { lo, hi } => (lo[coord], hi[coord]),
            SupportSet::Polytope { .. } => self.marginals[coord].support(),
        }
    }

    /// Largest value coordinate `coord` (0-based, constant excluded) can
    /// take over the support set.
    pub fn coordinate_max(&self, coord: usize) -> Result<f64> {
        match &self.support {
            SupportSet::Box { hi, .. } => Ok(hi[coord]),
            SupportSet::Polytope { w } => {
                let mut obj = DVector::zeros(self.dims.n_xi());
                obj[coord + 1] = 1.0;
                let cert = crate::synthesis::support_linear_max(
                    &SupportSet::Polytope { w: w.clone() },
                    &obj,
                )?;
                Ok(cert.value)
            }
        }
    }
}

/// True when the disturbance blocks are mutually independent, which is
/// the sufficient condition under which the relaxed program's value is a
/// certified lower bound.
pub fn check_assumption_independence(dm: &DisturbanceModel) -> bool {
    dm.independent
}

// ---------------------------------------------------------------------
// moments
// ---------------------------------------------------------------------

/// Second-moment matrix `M = E[xi xi']` of the full disturbance vector.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub matrix: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// False when some non-constant coordinate is deterministic, which
    /// makes `M` singular (positive semidefinite only).
    pub positive_definite: bool,
}

/// Computes `M = mu mu' + diag(var)` from the marginal laws.
///
/// The leading coordinate is the constant 1, so `M[0,0] = 1` and the first
/// row and column equal the mean vector.
pub fn compute_moment_matrix(dm: &DisturbanceModel) -> MomentMatrix {
    let mu = dm.mean_vector();
    let var = dm.variance_vector();
    let mut m = &mu * mu.transpose();
    for j in 0..mu.len() {
        m[(j, j)] += var[j];
    }
    let positive_definite = var.iter().skip(1).all(|&v| v > 0.0);
    MomentMatrix { matrix: m, mean: mu, variance: var, positive_definite }
}

// ---------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------

/// Derives the RNG for one sample of one stream; keyed by `(seed, index)`
/// so samples can be generated in any order or in parallel.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the pair; decorrelates consecutive keys.
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Draws one full-horizon disturbance vector (constant coordinate first).
pub fn sample_trajectory(dm: &DisturbanceModel, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, 0);
    sample_trajectory_with(dm, &mut rng)
}

pub fn sample_trajectory_with<R: Rng>(dm: &DisturbanceModel, rng: &mut R) -> DVector<f64> {
    let mut xi = DVector::zeros(dm.dims.n_xi());
    xi[0] = 1.0;
    for (j, m) in dm.marginals().iter().enumerate() {
        xi[j + 1] = m.sample(rng);
    }
    xi
}

// ---------------------------------------------------------------------
// daily profiles
// ---------------------------------------------------------------------

/// Mean available PV power of a unit with nameplate capacity `theta_mw`
/// at clock time `hour` (hours since midnight): a half-sine bell between
/// 06:00 and 18:00 peaking at half the nameplate, zero otherwise.
pub fn pv_profile(theta_mw: f64, hour: f64) -> f64 {
    theta_mw * (0.5 * ((hour - 6.0) * std::f64::consts::PI / 12.0).sin()).max(0.0)
}

/// Synthetic residential demand shape, peak-normalized: a 0.6 base with a
/// 0.4 afternoon/evening bump between 08:00 and 22:00 peaking at 15:00.
/// Stands in for a measured utility profile that is not publicly
/// available.
pub fn load_shape(hour: f64) -> f64 {
    0.6 + 0.4 * ((hour - 8.0) * std::f64::consts::PI / 14.0).sin().max(0.0)
}

// ---------------------------------------------------------------------
// scenario assembly
// ---------------------------------------------------------------------

/// How available PV power fluctuates around its daily profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PvLaw {
    /// `Uniform[0, 2 * mean(t)]`: full-range fluctuation.
    Uniform,
    /// Exactly the daily profile.
    Deterministic,
}

/// Declarative description of a complete study case.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub lines: Vec<Line>,
    pub base_kv: f64,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    pub periods: usize,
    pub period_hours: f64,
    /// Clock time of period 0, hours since midnight.
    pub start_hour: f64,
    pub storages: Vec<StorageSpec>,
    pub pvs: Vec<PvSpec>,
    pub loads: Vec<LoadSpec>,
    /// Multiplicative band of load uncertainty: demand is uniform on
    /// `[band.0 * mean, band.1 * mean]`; equal endpoints make it exact.
    pub load_band: (f64, f64),
    pub pv_law: PvLaw,
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<(RadialNetwork, ResourceSet, DisturbanceModel)> {
        let net = RadialNetwork::new(&self.lines, self.base_kv, self.v_min_pu, self.v_max_pu)?;
        let n = net.n();
        let dims = Dims::new(n, self.periods);
        if self.periods == 0 {
            return Err(Error::Scenario("horizon must have at least one period".into()));
        }
        let res = ResourceSet::new(dims, self.period_hours, &self.storages, &self.pvs)?;

        let (band_lo, band_hi) = self.load_band;
        if !(0.0 <= band_lo && band_lo <= band_hi) {
            return Err(Error::Scenario(format!(
                "load band must satisfy 0 <= lo <= hi, got [{band_lo}, {band_hi}]"
            )));
        }

        let mut load_peak = vec![0.0; n];
        let mut load_pf = vec![1.0f64; n];
        for ld in &self.loads {
            if ld.bus == 0 || ld.bus > n {
                return Err(Error::Scenario(format!("load at unknown bus {}", ld.bus)));
            }
            if !(ld.peak_mw >= 0.0) {
                return Err(Error::Scenario(format!("load peak at bus {} negative", ld.bus)));
            }
            if !(0.0 < ld.power_factor && ld.power_factor <= 1.0) {
                return Err(Error::Scenario(format!(
                    "power factor at bus {} must lie in (0, 1], got {}",
                    ld.bus, ld.power_factor
                )));
            }
            load_peak[ld.bus - 1] = ld.peak_mw;
            load_pf[ld.bus - 1] = ld.power_factor;
        }

        let mut marginals = Vec::with_capacity(3 * n * self.periods);
        for t in 0..self.periods {
            let hour = self.start_hour + (t as f64) * self.period_hours;
            for bus in 1..=n {
                let mu_p = load_peak[bus - 1] * load_shape(hour);
                let mu_q = mu_p * load_pf[bus - 1].acos().tan();
                for mu in [mu_p, mu_q] {
                    let (lo, hi) = (band_lo * mu, band_hi * mu);
                    marginals.push(if hi > lo {
                        Marginal::Uniform { lo, hi }
                    } else {
                        Marginal::PointMass { value: lo }
                    });
                }
                let mu_i = pv_profile(res.pv_power_capacity_mw[bus - 1], hour);
                marginals.push(match self.pv_law {
                    PvLaw::Uniform if mu_i > 0.0 => Marginal::Uniform { lo: 0.0, hi: 2.0 * mu_i },
                    _ => Marginal::PointMass { value: mu_i },
                });
            }
        }
        let dm = DisturbanceModel::new(dims, marginals)?;
        Ok((net, res, dm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_moments() {
        let m = Marginal::Uniform { lo: 0.7, hi: 1.3 };
        assert_abs_diff_eq!(m.mean(), 1.0, epsilon = 1e-15);
        // Second moment (a^2 + ab + b^2)/3 = 1.03.
        assert_abs_diff_eq!(m.mean().powi(2) + m.variance(), 1.03, epsilon = 1e-12);
    }

    #[test]
    fn truncated_gaussian_moments_match_numeric_integration() {
        let m = Marginal::TruncatedGaussian { center: 1.0, scale: 0.5, lo: 0.2, hi: 1.6 };
        // Simpson's rule on the renormalized density.
        let steps = 20_000;
        let h = (1.6 - 0.2) / steps as f64;
        let density = |x: f64| std_normal_pdf((x - 1.0) / 0.5) / 0.5;
        let mut mass = 0.0;
        let mut mean = 0.0;
        let mut second = 0.0;
        for k in 0..=steps {
            let x = 0.2 + k as f64 * h;
            let w = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            mass += w * density(x);
            mean += w * x * density(x);
            second += w * x * x * density(x);
        }
        mass *= h / 3.0;
        mean *= h / 3.0 / mass;
        second *= h / 3.0 / mass;
        assert_abs_diff_eq!(m.mean(), mean, epsilon = 1e-9);
        assert_abs_diff_eq!(m.variance(), second - mean * mean, epsilon = 1e-9);
    }

    #[test]
    fn moment_matrix_structure() {
        let dims = Dims::new(1, 1);
        let dm = DisturbanceModel::new(
            dims,
            vec![
                Marginal::Uniform { lo: 0.7, hi: 1.3 },
                Marginal::PointMass { value: 0.2 },
                Marginal::Uniform { lo: 0.0, hi: 2.0 },
            ],
        )
        .unwrap();
        let mm = compute_moment_matrix(&dm);
        assert_eq!(mm.matrix.nrows(), 4);
        assert_abs_diff_eq!(mm.matrix[(0, 0)], 1.0, epsilon = 0.0);
        // First row/column is the mean vector.
        for j in 0..4 {
            assert_abs_diff_eq!(mm.matrix[(0, j)], mm.mean[j], epsilon = 0.0);
            assert_abs_diff_eq!(mm.matrix[(j, 0)], mm.mean[j], epsilon = 0.0);
        }
        assert_abs_diff_eq!(mm.matrix[(1, 1)], 1.03, epsilon = 1e-12);
        // A point-mass coordinate makes M singular.
        assert!(!mm.positive_definite);
        let sym = mm.matrix.clone().symmetric_eigen();
        assert!(sym.eigenvalues.iter().all(|&e| e > -1e-12));
    }

    #[test]
    fn sample_moments_match_analytic() {
        let dims = Dims::new(1, 2);
        let dm = DisturbanceModel::new(
            dims,
            vec![
                Marginal::Uniform { lo: 0.35, hi: 0.65 },
                Marginal::TruncatedGaussian { center: 0.1, scale: 0.05, lo: 0.0, hi: 0.2 },
                Marginal::Uniform { lo: 0.0, hi: 4.0 },
                Marginal::PointMass { value: 0.4 },
                Marginal::Uniform { lo: 0.1, hi: 0.2 },
                Marginal::Uniform { lo: 0.0, hi: 3.0 },
            ],
        )
        .unwrap();
        let n_samples = 200_000;
        let mut sums = DVector::<f64>::zeros(dm.dims.n_xi());
        let mut sq = DVector::<f64>::zeros(dm.dims.n_xi());
        for k in 0..n_samples {
            let mut rng = stream_rng(7, k);
            let xi = sample_trajectory_with(&dm, &mut rng);
            sums += &xi;
            sq += xi.component_mul(&xi);
        }
        let mu = dm.mean_vector();
        let var = dm.variance_vector();
        for j in 1..dm.dims.n_xi() {
            let mean_j = sums[j] / n_samples as f64;
            let se = (var[j] / n_samples as f64).sqrt();
            assert!(
                (mean_j - mu[j]).abs() <= 5.0 * se + 1e-12,
                "coordinate {j}: empirical {mean_j} vs analytic {} (se {se})",
                mu[j]
            );
            let second_j = sq[j] / n_samples as f64;
            let analytic = mu[j] * mu[j] + var[j];
            assert!(
                (second_j - analytic).abs() <= 5.0 * (analytic + 1.0) / (n_samples as f64).sqrt(),
                "coordinate {j} second moment"
            );
        }
    }

    #[test]
    fn samples_stay_in_support() {
        let m = Marginal::TruncatedGaussian { center: 0.0, scale: 1.0, lo: -0.5, hi: 0.25 };
        let mut rng = stream_rng(3, 0);
        for _ in 0..10_000 {
            let x = m.sample(&mut rng);
            assert!((-0.5..=0.25).contains(&x));
        }
    }

    #[test]
    fn identical_seed_identical_draws() {
        let dims = Dims::new(2, 2);
        let marginals: Vec<Marginal> =
            (0..12).map(|j| Marginal::Uniform { lo: 0.0, hi: 1.0 + j as f64 }).collect();
        let dm = DisturbanceModel::new(dims, marginals).unwrap();
        let a = sample_trajectory(&dm, 99);
        let b = sample_trajectory(&dm, 99);
        assert_eq!(a, b);
        let c = sample_trajectory(&dm, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn pv_profile_bell() {
        assert_abs_diff_eq!(pv_profile(4.0, 12.0), 2.0, epsilon = 1e-15);
        assert_eq!(pv_profile(4.0, 3.0), 0.0);
        assert_eq!(pv_profile(4.0, 20.0), 0.0);
        assert!(pv_profile(4.0, 9.0) > 0.0);
    }

    #[test]
    fn load_shape_band() {
        for h in 0..24 {
            let s = load_shape(h as f64);
            assert!((0.6..=1.0).contains(&s));
        }
        assert_abs_diff_eq!(load_shape(15.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(load_shape(2.0), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn independence_flag_gates_certification() {
        let dims = Dims::new(1, 1);
        let marginals = vec![Marginal::PointMass { value: 0.0 }; 3];
        let dm = DisturbanceModel::new(dims, marginals).unwrap();
        assert!(check_assumption_independence(&dm));
        assert!(!check_assumption_independence(&dm.with_correlation_flag()));
    }

    #[test]
    fn declared_box_must_cover_marginals() {
        let dims = Dims::new(1, 1);
        let dm = DisturbanceModel::new(
            dims,
            vec![
                Marginal::Uniform { lo: 0.0, hi: 2.0 },
                Marginal::PointMass { value: 0.0 },
                Marginal::PointMass { value: 0.0 },
            ],
        )
        .unwrap();
        let lo = DVector::from_vec(vec![0.5, 0.0, 0.0]);
        let hi = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        assert!(dm.with_box_support(lo, hi).is_err());
    }

    #[test]
    fn scenario_spec_builds_consistent_model() {
        let spec = ScenarioSpec {
            lines: (1..=3)
                .map(|bus| Line { bus, parent: bus - 1, r_ohm: 0.466, x_ohm: 0.733 })
                .collect(),
            base_kv: 12.0,
            v_min_pu: 0.95,
            v_max_pu: 1.05,
            periods: 4,
            period_hours: 1.0,
            start_hour: 10.0,
            storages: vec![StorageSpec {
                bus: 2,
                capacity_mwh: 0.5,
                p_min_mw: -0.2,
                p_max_mw: 0.2,
                initial_mwh: 0.1,
            }],
            pvs: vec![PvSpec { bus: 3, power_capacity_mw: 4.0, apparent_capacity_mva: 5.0 }],
            loads: vec![LoadSpec { bus: 1, peak_mw: 0.4, power_factor: 0.95 }],
            load_band: (0.7, 1.3),
            pv_law: PvLaw::Uniform,
        };
        let (net, res, dm) = spec.build().unwrap();
        assert_eq!(net.n(), 3);
        assert_abs_diff_eq!(res.apparent_capacity_mva[2], 5.0, epsilon = 0.0);
        // Load at bus 1, hour 12: mean 0.4 * shape(12), uniform band.
        let mu = 0.4 * load_shape(12.0);
        match dm.marginal(2, 1, XiKind::LoadActive) {
            Marginal::Uniform { lo, hi } => {
                assert_abs_diff_eq!(*lo, 0.7 * mu, epsilon = 1e-12);
                assert_abs_diff_eq!(*hi, 1.3 * mu, epsilon = 1e-12);
            }
            other => panic!("expected uniform load, got {other:?}"),
        }
        // PV at bus 3, hour 12: uniform [0, 2 * pv_profile].
        match dm.marginal(2, 3, XiKind::PvAvailable) {
            Marginal::Uniform { lo, hi } => {
                assert_eq!(*lo, 0.0);
                assert_abs_diff_eq!(*hi, 2.0 * pv_profile(4.0, 12.0), epsilon = 1e-12);
            }
            other => panic!("expected uniform PV, got {other:?}"),
        }
        // No load at bus 2: exact zero.
        assert_eq!(
            *dm.marginal(0, 2, XiKind::LoadActive),
            Marginal::PointMass { value: 0.0 }
        );
    }
}
