//! Scenario configuration files.
//!
//! A scenario is a versioned TOML document with four fixed sections —
//! `[network]`, `[resources]`, `[uncertainty]`, `[solve]` — plus an
//! optional `[sweep]` section used only by the sweep command. Parsing is
//! strict: unknown keys are rejected so typos surface as diagnostics
//! instead of silently falling back to defaults, and TOML errors carry
//! line/column anchors.

use std::path::Path;

use derflow::network::Line;
use derflow::qp::SolveSettings;
use derflow::scenario::{LoadSpec, PvLaw, PvSpec, ScenarioSpec, StorageSpec};
use derflow::synthesis::SynthesisOptions;
use serde::Deserialize;

/// The one schema version this build reads.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    pub network: NetworkSection,
    pub resources: ResourceSection,
    pub uncertainty: UncertaintySection,
    #[serde(default)]
    pub solve: SolveSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub base_kv: f64,
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    /// One entry per bus; parent 0 is the substation.
    pub lines: Vec<LineRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRow {
    pub bus: usize,
    pub parent: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSection {
    pub periods: usize,
    pub period_hours: f64,
    /// Clock time of the first period, hours since midnight.
    pub start_hour: f64,
    #[serde(default)]
    pub storages: Vec<StorageRow>,
    #[serde(default)]
    pub pvs: Vec<PvRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageRow {
    pub bus: usize,
    pub capacity_mwh: f64,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    pub initial_mwh: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvRow {
    pub bus: usize,
    pub power_capacity_mw: f64,
    pub apparent_capacity_mva: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySection {
    #[serde(default)]
    pub loads: Vec<LoadRow>,
    /// Multiplicative band around the mean demand profile; equal
    /// endpoints make demand deterministic.
    pub load_band: [f64; 2],
    /// "uniform" (full-range fluctuation) or "deterministic".
    pub pv_law: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadRow {
    pub bus: usize,
    pub peak_mw: f64,
    pub power_factor: f64,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub feas_tol: Option<f64>,
    pub opt_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub max_rounds: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Only "theta" (PV active-power capacity) is sweepable.
    pub parameter: String,
    pub grid: Vec<f64>,
    /// MVA rating per MW of swept capacity (default 1.25).
    pub apparent_ratio: Option<f64>,
}

impl ConfigFile {
    pub fn scenario(&self) -> ScenarioSpec {
        ScenarioSpec {
            lines: self
                .network
                .lines
                .iter()
                .map(|l| Line { bus: l.bus, parent: l.parent, r_ohm: l.r_ohm, x_ohm: l.x_ohm })
                .collect(),
            base_kv: self.network.base_kv,
            v_min_pu: self.network.v_min_pu,
            v_max_pu: self.network.v_max_pu,
            periods: self.resources.periods,
            period_hours: self.resources.period_hours,
            start_hour: self.resources.start_hour,
            storages: self
                .resources
                .storages
                .iter()
                .map(|s| StorageSpec {
                    bus: s.bus,
                    capacity_mwh: s.capacity_mwh,
                    p_min_mw: s.p_min_mw,
                    p_max_mw: s.p_max_mw,
                    initial_mwh: s.initial_mwh,
                })
                .collect(),
            pvs: self
                .resources
                .pvs
                .iter()
                .map(|p| PvSpec {
                    bus: p.bus,
                    power_capacity_mw: p.power_capacity_mw,
                    apparent_capacity_mva: p.apparent_capacity_mva,
                })
                .collect(),
            loads: self
                .uncertainty
                .loads
                .iter()
                .map(|l| LoadSpec { bus: l.bus, peak_mw: l.peak_mw, power_factor: l.power_factor })
                .collect(),
            load_band: (self.uncertainty.load_band[0], self.uncertainty.load_band[1]),
            pv_law: if self.uncertainty.pv_law == "deterministic" {
                PvLaw::Deterministic
            } else {
                PvLaw::Uniform
            },
        }
    }

    /// Scenario with every PV unit's active capacity replaced by
    /// `theta_mw` and its MVA rating scaled along at `apparent_ratio`.
    pub fn scenario_at_theta(&self, theta_mw: f64, apparent_ratio: f64) -> ScenarioSpec {
        let mut spec = self.scenario();
        for pv in &mut spec.pvs {
            pv.power_capacity_mw = theta_mw;
            pv.apparent_capacity_mva = apparent_ratio * theta_mw;
        }
        spec
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        let defaults = SynthesisOptions::default();
        let settings_default = SolveSettings::default();
        SynthesisOptions {
            settings: SolveSettings {
                feas_tol: self.solve.feas_tol.unwrap_or(settings_default.feas_tol),
                opt_tol: self.solve.opt_tol.unwrap_or(settings_default.opt_tol),
                max_iter: self.solve.max_iter.unwrap_or(settings_default.max_iter),
                polish: settings_default.polish,
            },
            max_rounds: self.solve.max_rounds.unwrap_or(defaults.max_rounds),
        }
    }

    pub fn seed(&self) -> u64 {
        self.solve.seed.unwrap_or(1)
    }

    pub fn samples(&self) -> usize {
        self.solve.samples.unwrap_or(10_000)
    }
}

/// Reads and structurally validates a scenario file. The message of a
/// failed parse includes the TOML line/column diagnostic.
pub fn load_config(path: &Path) -> Result<ConfigFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let cfg: ConfigFile =
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if cfg.version != SCHEMA_VERSION {
        return Err(format!(
            "{}: schema version {} is not supported (this build reads version {})",
            path.display(),
            cfg.version,
            SCHEMA_VERSION
        ));
    }
    if cfg.uncertainty.pv_law != "uniform" && cfg.uncertainty.pv_law != "deterministic" {
        return Err(format!(
            "{}: pv_law must be \"uniform\" or \"deterministic\", got {:?}",
            path.display(),
            cfg.uncertainty.pv_law
        ));
    }
    Ok(cfg)
}
