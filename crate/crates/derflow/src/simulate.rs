//! Monte Carlo evaluation of a policy on the physical model.
//!
//! Synthesis guarantees feasibility for the *approximated* constraint
//! set; simulation checks the policy against the true one — in
//! particular the genuine circular inverter capability rather than its
//! inscribed box — and estimates the expected cost with a confidence
//! interval. A fast-timescale variant replays each period as several
//! substeps with independently redrawn disturbances, to probe how the
//! slow-scale design degrades when the world moves faster than the
//! controller.
//!
//! Sampling is deterministic: sample `k` of seed `s` uses its own
//! counter-derived stream, so reports are reproducible and independent
//! of sample order or count.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{build_lifted_system, build_voltage_maps};
use crate::error::{Error, Result};
use crate::layout::{Dims, InputKind, XiKind};
use crate::network::RadialNetwork;
use crate::policy::AffinePolicy;
use crate::scenario::{sample_trajectory_with, stream_rng, DisturbanceModel, ResourceSet, SupportSet};

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.5758293035489004;

/// Quantile levels reported in the voltage bands.
pub const BAND_LEVELS: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub samples: usize,
    pub seed: u64,
    /// Relative slack applied to every bound before counting a
    /// violation, absorbing solver-tolerance-level excess.
    pub slack: f64,
    /// Buses whose voltage distribution is recorded; empty = every bus
    /// with storage or PV plus the electrically deepest bus.
    pub monitored: Vec<usize>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions { samples: 10_000, seed: 1, slack: 1e-6, monitored: Vec::new() }
    }
}

/// Samples with at least one violation of each kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ViolationCounts {
    pub voltage: usize,
    pub energy: usize,
    pub power: usize,
    pub reactive: usize,
}

#[derive(Debug, Clone)]
pub struct WorstViolation {
    pub kind: &'static str,
    pub bus: usize,
    pub t: usize,
    /// Excess over the bound, normalized by `1 + |bound|`.
    pub excess: f64,
}

/// Per-period voltage quantiles at one bus, in kV.
#[derive(Debug, Clone)]
pub struct VoltageBand {
    pub bus: usize,
    pub levels: Vec<f64>,
    /// `kv[level_index][t]`.
    pub kv: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub samples: usize,
    pub mean_cost: f64,
    pub ci99_halfwidth: f64,
    /// Samples violating any true constraint.
    pub violating_samples: usize,
    pub violation_fraction: f64,
    pub counts: ViolationCounts,
    pub worst: Option<WorstViolation>,
    pub bands: Vec<VoltageBand>,
}

/// Sample mean and 99% confidence halfwidth (`z * s / sqrt(n)`).
pub fn estimate_cost_ci(costs: &[f64]) -> (f64, f64) {
    let n = costs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = costs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Z_99 * (var / n as f64).sqrt())
}

/// How the disturbance behaves at the fast timescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastLaw {
    /// Each substep redraws every coordinate independently and uniformly
    /// over its support-box interval; requires a box support.
    UniformInBox,
    /// The slow-scale draw holds for the whole period, so substep
    /// resolution changes nothing but the bookkeeping.
    FrozenSlow,
}

struct Tracker {
    slack: f64,
    violated: [bool; 4],
    counts: ViolationCounts,
    worst: Option<WorstViolation>,
}

impl Tracker {
    fn new(slack: f64) -> Tracker {
        Tracker { slack, violated: [false; 4], counts: ViolationCounts::default(), worst: None }
    }

    fn begin_sample(&mut self) {
        self.violated = [false; 4];
    }

    /// Checks `value <= bound`, recording a violation beyond the slack.
    fn check_upper(&mut self, kind_idx: usize, kind: &'static str, bus: usize, t: usize, value: f64, bound: f64) {
        let scale = 1.0 + bound.abs();
        let excess = (value - bound) / scale;
        if excess > self.slack {
            self.violated[kind_idx] = true;
            if self.worst.as_ref().is_none_or(|w| excess > w.excess) {
                self.worst = Some(WorstViolation { kind, bus, t, excess });
            }
        }
    }

    fn end_sample(&mut self) -> bool {
        let any = self.violated.iter().any(|&v| v);
        if self.violated[0] {
            self.counts.voltage += 1;
        }
        if self.violated[1] {
            self.counts.energy += 1;
        }
        if self.violated[2] {
            self.counts.power += 1;
        }
        if self.violated[3] {
            self.counts.reactive += 1;
        }
        any
    }
}

fn default_monitored(net: &RadialNetwork, res: &ResourceSet) -> Vec<usize> {
    let n = net.n();
    let mut buses: Vec<usize> = (1..=n)
        .filter(|&b| {
            res.energy_capacity_mwh[b - 1] > 0.0
                || res.p_min_mw[b - 1] != res.p_max_mw[b - 1]
                || res.apparent_capacity_mva[b - 1] > 0.0
        })
        .collect();
    let deepest = (1..=n).max_by_key(|&b| (net.root_path(b).len(), b)).unwrap_or(n);
    if !buses.contains(&deepest) {
        buses.push(deepest);
    }
    buses.sort_unstable();
    buses
}

fn check_dims(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    policy: &AffinePolicy,
) -> Result<Dims> {
    let dims = res.dims;
    if net.n() != dims.n || dm.dims != dims || policy.dims != dims {
        return Err(Error::Dimension(format!(
            "network ({} buses), resources ({}x{}), disturbance model ({}x{}) and policy \
             ({}x{}) must agree",
            net.n(),
            res.dims.n,
            res.dims.horizon,
            dm.dims.n,
            dm.dims.horizon,
            policy.dims.n,
            policy.dims.horizon,
        )));
    }
    if let Some((row, col)) = policy.causality_violation() {
        return Err(Error::PolicyFormat(format!(
            "policy gain at ({row}, {col}) reaches outside its information set; refusing \
             to simulate an acausal controller"
        )));
    }
    Ok(dims)
}

struct BandCollector {
    buses: Vec<usize>,
    /// `[bus][t][sample]` in kV, f32 to keep large runs cheap.
    v_kv: Vec<Vec<Vec<f32>>>,
}

impl BandCollector {
    fn new(buses: Vec<usize>, horizon: usize, samples: usize) -> BandCollector {
        let v_kv = buses
            .iter()
            .map(|_| (0..horizon).map(|_| Vec::with_capacity(samples)).collect())
            .collect();
        BandCollector { buses, v_kv }
    }

    fn record(&mut self, t: usize, bus_index: usize, v_kv2: f64) {
        let pos = self.buses.iter().position(|&b| b == bus_index + 1);
        if let Some(p) = pos {
            self.v_kv[p][t].push(v_kv2.max(0.0).sqrt() as f32);
        }
    }

    fn finish(self) -> Vec<VoltageBand> {
        self.buses
            .iter()
            .zip(self.v_kv)
            .map(|(&bus, mut per_t)| {
                let horizon = per_t.len();
                let mut kv = vec![vec![0.0f64; horizon]; BAND_LEVELS.len()];
                for (t, slot) in per_t.iter_mut().enumerate() {
                    slot.sort_by(f32::total_cmp);
                    for (li, &q) in BAND_LEVELS.iter().enumerate() {
                        if slot.is_empty() {
                            continue;
                        }
                        let idx = ((q * slot.len() as f64).ceil() as usize)
                            .clamp(1, slot.len())
                            - 1;
                        kv[li][t] = slot[idx] as f64;
                    }
                }
                VoltageBand { bus, levels: BAND_LEVELS.to_vec(), kv }
            })
            .collect()
    }
}

/// Evaluates a policy at the design timescale: one disturbance draw per
/// period, inputs from the policy, violations counted against the true
/// constraint set (exact inverter disk included).
pub fn simulate_policy(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    policy: &AffinePolicy,
    opts: &SimulationOptions,
) -> Result<SimulationReport> {
    let dims = check_dims(net, res, dm, policy)?;
    let lifted = build_lifted_system(net, res)?;
    let volt = build_voltage_maps(net, dims);
    let monitored =
        if opts.monitored.is_empty() { default_monitored(net, res) } else { opts.monitored.clone() };
    for &b in &monitored {
        if b == 0 || b > dims.n {
            return Err(Error::Scenario(format!("monitored bus {b} does not exist")));
        }
    }
    let mut bands = BandCollector::new(monitored, dims.horizon, opts.samples);
    let mut tracker = Tracker::new(opts.slack);
    let mut costs = Vec::with_capacity(opts.samples);
    let mut violating = 0usize;

    for k in 0..opts.samples {
        let mut rng = stream_rng(opts.seed, k as u64);
        let xi = sample_trajectory_with(dm, &mut rng);
        let u = policy.inputs(&xi);
        let x = &lifted.a_lift * &res.initial_energy_mwh + &lifted.b_lift * &u;
        let flows = &lifted.loss.loss_u * &u + &lifted.loss.loss_xi * &xi;
        let quad: f64 =
            flows.iter().zip(lifted.loss.sigma.iter()).map(|(f, s)| s * f * f).sum();
        costs.push(quad + lifted.terminal_cost.dot(&x));

        let v2 = &volt.volt_u * &u + &volt.volt_xi * &xi;
        tracker.begin_sample();
        for t in 0..dims.horizon {
            for bus in 1..=dims.n {
                let b = bus - 1;
                let v_abs = net.v0_kv2() + v2[t * dims.n + b];
                tracker.check_upper(0, "overvoltage", bus, t, v_abs, net.v_hi_kv2());
                tracker.check_upper(0, "undervoltage", bus, t, -v_abs, -net.v_lo_kv2());
                bands.record(t, b, v_abs);

                let xt = x[dims.x_index(t + 1, bus)];
                tracker.check_upper(1, "energy overflow", bus, t + 1, xt, res.energy_capacity_mwh[b]);
                tracker.check_upper(1, "energy depletion", bus, t + 1, -xt, 0.0);

                let p = u[dims.u_index(t, bus, InputKind::StoragePower)];
                tracker.check_upper(2, "discharge limit", bus, t, p, res.p_max_mw[b]);
                tracker.check_upper(2, "charge limit", bus, t, -p, -res.p_min_mw[b]);

                let q = u[dims.u_index(t, bus, InputKind::InverterReactive)];
                let a = xi[dims.xi_index(t, bus, XiKind::PvAvailable)];
                let s = res.apparent_capacity_mva[b];
                tracker.check_upper(3, "supply beyond rating", bus, t, a, s);
                let q_cap = (s * s - a * a).max(0.0).sqrt();
                tracker.check_upper(3, "reactive beyond disk", bus, t, q.abs(), q_cap);
            }
        }
        if tracker.end_sample() {
            violating += 1;
        }
    }

    let (mean_cost, ci99_halfwidth) = estimate_cost_ci(&costs);
    Ok(SimulationReport {
        samples: opts.samples,
        mean_cost,
        ci99_halfwidth,
        violating_samples: violating,
        violation_fraction: violating as f64 / opts.samples.max(1) as f64,
        counts: tracker.counts,
        worst: tracker.worst,
        bands: bands.finish(),
    })
}

/// Evaluates a policy against disturbances that move faster than it
/// does. Each period splits into `substeps` equal slices; the policy's
/// contemporaneous gain acts on the instantaneous disturbance while its
/// memory of past periods sees their realized averages. States advance
/// slice by slice, and all violations are counted at slice resolution.
/// With one substep and the frozen law this reproduces
/// [`simulate_policy`] exactly.
pub fn simulate_fast(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    policy: &AffinePolicy,
    substeps: usize,
    law: FastLaw,
    opts: &SimulationOptions,
) -> Result<SimulationReport> {
    let dims = check_dims(net, res, dm, policy)?;
    if substeps == 0 {
        return Err(Error::Scenario("need at least one substep per period".into()));
    }
    let (box_lo, box_hi) = match (law, dm.support()) {
        (FastLaw::UniformInBox, SupportSet::Box { lo, hi }) => (lo.clone(), hi.clone()),
        (FastLaw::UniformInBox, _) => {
            return Err(Error::FastSupportViolation(
                "fast-scale uniform redraws need a bounded box support".into(),
            ));
        }
        (FastLaw::FrozenSlow, _) => (DVector::zeros(0), DVector::zeros(0)),
    };
    let volt = build_voltage_maps(net, dims);
    let (n, horizon) = (dims.n, dims.horizon);
    // Per-period voltage blocks (independent across periods).
    let vu0 = volt.volt_u.view((0, 0), (n, 2 * n)).into_owned();
    let vxi0 = volt.volt_xi.view((0, 1), (n, 3 * n)).into_owned();
    let lifted = build_lifted_system(net, res)?;
    let sigma0 = lifted.loss.sigma.rows(0, 2 * n).into_owned();
    let lu0 = lifted.loss.loss_u.view((0, 0), (2 * n, 2 * n)).into_owned();
    let lxi0 = lifted.loss.loss_xi.view((0, 1), (2 * n, 3 * n)).into_owned();

    let mut tracker = Tracker::new(opts.slack);
    let mut costs = Vec::with_capacity(opts.samples);
    let mut violating = 0usize;
    use rand::Rng;

    for sample in 0..opts.samples {
        let mut rng = stream_rng(opts.seed, sample as u64);
        let slow_xi = sample_trajectory_with(dm, &mut rng);
        let mut x = res.initial_energy_mwh.clone();
        // Realized fast-scale averages of past periods, replacing the
        // slow draw in the policy's memory.
        let mut xi_mem = slow_xi.clone();
        let mut cost = 0.0;
        tracker.begin_sample();

        for t in 0..horizon {
            let mut period_avg = DVector::zeros(3 * n);
            for _ in 0..substeps {
                // Instantaneous disturbance for this slice.
                let mut xi_now = DVector::zeros(3 * n);
                for j in 0..3 * n {
                    let full = t * 3 * n + j;
                    xi_now[j] = match law {
                        FastLaw::FrozenSlow => slow_xi[1 + full],
                        FastLaw::UniformInBox => {
                            if box_lo[full] == box_hi[full] {
                                box_lo[full]
                            } else {
                                rng.gen_range(box_lo[full]..box_hi[full])
                            }
                        }
                    };
                }
                period_avg += &xi_now / substeps as f64;

                // Policy evaluation: memory vector with the current
                // period's block replaced by the instantaneous draw.
                let mut xi_eval = xi_mem.clone();
                xi_eval.rows_mut(1 + t * 3 * n, 3 * n).copy_from(&xi_now);
                let u_full = policy.inputs(&xi_eval);
                let u_t = u_full.rows(t * 2 * n, 2 * n).into_owned();

                // Physics of the slice.
                let flows = &lu0 * &u_t + &lxi0 * &xi_now;
                let quad: f64 =
                    flows.iter().zip(sigma0.iter()).map(|(f, s)| s * f * f).sum();
                cost += quad / substeps as f64;
                let v2 = &vu0 * &u_t + &vxi0 * &xi_now;
                for bus in 1..=n {
                    let b = bus - 1;
                    let v_abs = net.v0_kv2() + v2[b];
                    tracker.check_upper(0, "overvoltage", bus, t, v_abs, net.v_hi_kv2());
                    tracker.check_upper(0, "undervoltage", bus, t, -v_abs, -net.v_lo_kv2());

                    let p = u_t[2 * b];
                    tracker.check_upper(2, "discharge limit", bus, t, p, res.p_max_mw[b]);
                    tracker.check_upper(2, "charge limit", bus, t, -p, -res.p_min_mw[b]);

                    let q = u_t[2 * b + 1];
                    let a = xi_now[3 * b + 2];
                    let s = res.apparent_capacity_mva[b];
                    tracker.check_upper(3, "supply beyond rating", bus, t, a, s);
                    let q_cap = (s * s - a * a).max(0.0).sqrt();
                    tracker.check_upper(3, "reactive beyond disk", bus, t, q.abs(), q_cap);

                    // State advances by this slice's share of the period.
                    x[b] -= res.period_hours / substeps as f64 * p;
                }
                for bus in 1..=n {
                    let b = bus - 1;
                    tracker.check_upper(1, "energy overflow", bus, t + 1, x[b], res.energy_capacity_mwh[b]);
                    tracker.check_upper(1, "energy depletion", bus, t + 1, -x[b], 0.0);
                }
            }
            // Past periods enter the policy through their realized
            // averages from here on.
            xi_mem.rows_mut(1 + t * 3 * n, 3 * n).copy_from(&period_avg);
        }
        cost += x.sum(); // terminal stored energy, every bus weighted 1
        costs.push(cost);
        if tracker.end_sample() {
            violating += 1;
        }
    }

    let (mean_cost, ci99_halfwidth) = estimate_cost_ci(&costs);
    Ok(SimulationReport {
        samples: opts.samples,
        mean_cost,
        ci99_halfwidth,
        violating_samples: violating,
        violation_fraction: violating as f64 / opts.samples.max(1) as f64,
        counts: tracker.counts,
        worst: tracker.worst,
        bands: Vec::new(),
    })
}

/// One sample's complete design-timescale history, for element-wise
/// comparison against other rollout schemes.
#[derive(Debug, Clone)]
pub struct SlowRollout {
    /// Realized disturbance trajectory, `1 + 3nT` with the leading one.
    pub xi: DVector<f64>,
    /// Inputs, `2nT`, bus-major within each period.
    pub inputs: DVector<f64>,
    /// Stored energy per bus and period boundary, `n x (T+1)` flattened
    /// period-major (column `t` = start of period `t`).
    pub energy: DMatrix<f64>,
    pub cost: f64,
}

/// One sample's complete fast-timescale history at slice resolution.
#[derive(Debug, Clone)]
pub struct FastRollout {
    /// Instantaneous disturbance per slice, `3n x (T*substeps)`.
    pub xi: DMatrix<f64>,
    /// Applied inputs per slice, `2n x (T*substeps)`.
    pub inputs: DMatrix<f64>,
    /// Stored energy after each slice, `n x (T*substeps + 1)`; column 0
    /// is the initial condition.
    pub energy: DMatrix<f64>,
    pub cost: f64,
}

/// Replays sample `k` of the [`simulate_policy`] stream and returns its
/// full trajectory instead of aggregate statistics.
pub fn slow_rollout(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    policy: &AffinePolicy,
    seed: u64,
    k: u64,
) -> Result<SlowRollout> {
    let dims = check_dims(net, res, dm, policy)?;
    let lifted = build_lifted_system(net, res)?;
    let mut rng = stream_rng(seed, k);
    let xi = sample_trajectory_with(dm, &mut rng);
    let inputs = policy.inputs(&xi);
    let x = &lifted.a_lift * &res.initial_energy_mwh + &lifted.b_lift * &inputs;
    let flows = &lifted.loss.loss_u * &inputs + &lifted.loss.loss_xi * &xi;
    let quad: f64 = flows.iter().zip(lifted.loss.sigma.iter()).map(|(f, s)| s * f * f).sum();
    let cost = quad + lifted.terminal_cost.dot(&x);
    let energy = DMatrix::from_fn(dims.n, dims.horizon + 1, |b, t| x[dims.x_index(t, b + 1)]);
    Ok(SlowRollout { xi, inputs, energy, cost })
}

/// Replays sample `k` of the [`simulate_fast`] stream and returns its
/// slice-resolution trajectory instead of aggregate statistics. The
/// random stream, input rule, state stepping, and cost accumulation are
/// the same as in the aggregate view.
pub fn fast_rollout(
    net: &RadialNetwork,
    res: &ResourceSet,
    dm: &DisturbanceModel,
    policy: &AffinePolicy,
    substeps: usize,
    law: FastLaw,
    seed: u64,
    k: u64,
) -> Result<FastRollout> {
    let dims = check_dims(net, res, dm, policy)?;
    if substeps == 0 {
        return Err(Error::Scenario("need at least one substep per period".into()));
    }
    let (box_lo, box_hi) = match (law, dm.support()) {
        (FastLaw::UniformInBox, SupportSet::Box { lo, hi }) => (lo.clone(), hi.clone()),
        (FastLaw::UniformInBox, _) => {
            return Err(Error::FastSupportViolation(
                "fast-scale uniform redraws need a bounded box support".into(),
            ));
        }
        (FastLaw::FrozenSlow, _) => (DVector::zeros(0), DVector::zeros(0)),
    };
    let (n, horizon) = (dims.n, dims.horizon);
    let lifted = build_lifted_system(net, res)?;
    let sigma0 = lifted.loss.sigma.rows(0, 2 * n).into_owned();
    let lu0 = lifted.loss.loss_u.view((0, 0), (2 * n, 2 * n)).into_owned();
    let lxi0 = lifted.loss.loss_xi.view((0, 1), (2 * n, 3 * n)).into_owned();

    let slices = horizon * substeps;
    let mut xi_rec = DMatrix::zeros(3 * n, slices);
    let mut u_rec = DMatrix::zeros(2 * n, slices);
    let mut energy = DMatrix::zeros(n, slices + 1);
    energy.column_mut(0).copy_from(&res.initial_energy_mwh);

    let mut rng = stream_rng(seed, k);
    let slow_xi = sample_trajectory_with(dm, &mut rng);
    let mut x = res.initial_energy_mwh.clone();
    let mut xi_mem = slow_xi.clone();
    let mut cost = 0.0;
    use rand::Rng;

    for t in 0..horizon {
        let mut period_avg = DVector::zeros(3 * n);
        for sub in 0..substeps {
            let slice = t * substeps + sub;
            let mut xi_now = DVector::zeros(3 * n);
            for j in 0..3 * n {
                let full = t * 3 * n + j;
                xi_now[j] = match law {
                    FastLaw::FrozenSlow => slow_xi[1 + full],
                    FastLaw::UniformInBox => {
                        if box_lo[full] == box_hi[full] {
                            box_lo[full]
                        } else {
                            rng.gen_range(box_lo[full]..box_hi[full])
                        }
                    }
                };
            }
            period_avg += &xi_now / substeps as f64;

            let mut xi_eval = xi_mem.clone();
            xi_eval.rows_mut(1 + t * 3 * n, 3 * n).copy_from(&xi_now);
            let u_full = policy.inputs(&xi_eval);
            let u_t = u_full.rows(t * 2 * n, 2 * n).into_owned();

            let flows = &lu0 * &u_t + &lxi0 * &xi_now;
            let quad: f64 = flows.iter().zip(sigma0.iter()).map(|(f, s)| s * f * f).sum();
            cost += quad / substeps as f64;
            for b in 0..n {
                x[b] -= res.period_hours / substeps as f64 * u_t[2 * b];
            }
            xi_rec.column_mut(slice).copy_from(&xi_now);
            u_rec.column_mut(slice).copy_from(&u_t);
            energy.column_mut(slice + 1).copy_from(&x);
        }
        xi_mem.rows_mut(1 + t * 3 * n, 3 * n).copy_from(&period_avg);
    }
    cost += x.sum();
    Ok(FastRollout { xi: xi_rec, inputs: u_rec, energy, cost })
}
