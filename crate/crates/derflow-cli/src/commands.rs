//! Subcommand implementations.
//!
//! Every command returns `Ok(())` or a [`Failure`] carrying the process
//! exit code: 1 for an infeasible program, 2 for configuration/input
//! errors, 3 for numerical solver failures. All CSV output is
//! deterministic for a fixed config and seed; wall-clock timings go to
//! stdout only.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use derflow::policy::AffinePolicy;
use derflow::scenario::{check_assumption_independence, ScenarioSpec};
use derflow::simulate::{
    simulate_fast, simulate_policy, FastLaw, SimulationOptions, SimulationReport,
};
use derflow::synthesis::{compute_lower_bound, synthesize_policy, SynthesisResult};
use derflow::Error;

use crate::config::{load_config, ConfigFile};

pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: String) -> Failure {
        Failure { code: 2, message }
    }
}

/// Exit-code classification of library errors: infeasibility is a
/// finding (1), bad input is the user's to fix (2), numerical failure is
/// the solver's (3).
fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::Infeasible(_) => 1,
        Error::Network(_)
        | Error::Scenario(_)
        | Error::Dimension(_)
        | Error::PolicyFormat(_)
        | Error::SupplyExceedsCapacity { .. }
        | Error::UnboundedSupport(_)
        | Error::FastSupportViolation(_)
        | Error::Io(_) => 2,
        Error::SolverFailure(_)
        | Error::IndefiniteHessian { .. }
        | Error::InconsistentEqualities { .. } => 3,
    };
    Failure { code, message: e.to_string() }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

/// Floats in CSV output: shortest representation that round-trips.
fn csv_num(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------

pub fn cmd_validate(config_path: &Path) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(Failure::config)?;
    let spec = cfg.scenario();
    let (net, res, dm) = spec.build().map_err(classify)?;
    let dims = res.dims;
    let storage_buses: Vec<usize> =
        (1..=dims.n).filter(|&b| res.energy_capacity_mwh[b - 1] > 0.0).collect();
    let pv_buses: Vec<usize> =
        (1..=dims.n).filter(|&b| res.apparent_capacity_mva[b - 1] > 0.0).collect();
    println!("{} is valid", config_path.display());
    println!("  buses: {} on a radial feeder, base {} kV", dims.n, net.v0_kv());
    println!(
        "  horizon: {} periods x {} h starting at {:02.0}:00",
        dims.horizon,
        res.period_hours,
        cfg.resources.start_hour.floor()
    );
    println!("  storage buses: {storage_buses:?}");
    println!("  pv buses: {pv_buses:?}");
    println!(
        "  uncertainty: {} coordinates, {} support, independence {}",
        dims.n_xi() - 1,
        if dm.support().is_box() { "box" } else { "polytope" },
        if check_assumption_independence(&dm) { "assumed" } else { "not assumed" }
    );
    if let Some(sweep) = &cfg.sweep {
        if sweep.parameter != "theta" {
            return Err(Failure::config(format!(
                "sweep parameter {:?} is not supported (only \"theta\")",
                sweep.parameter
            )));
        }
        if sweep.grid.is_empty() {
            return Err(Failure::config("sweep grid is empty".into()));
        }
        println!("  sweep: theta over {:?}", sweep.grid);
    }
    Ok(())
}

// ---------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------

fn run_synthesis(cfg: &ConfigFile, spec: &ScenarioSpec) -> Result<SynthesisResult, Failure> {
    let (net, res, dm) = spec.build().map_err(classify)?;
    synthesize_policy(&net, &res, &dm, &cfg.synthesis_options()).map_err(classify)
}

pub fn cmd_synthesize(
    config_path: &Path,
    out_path: &Path,
    summary_path: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(Failure::config)?;
    let spec = cfg.scenario();
    let started = Instant::now();
    let result = run_synthesis(&cfg, &spec)?;
    let elapsed = started.elapsed().as_secs_f64();
    result.policy.save(out_path).map_err(classify)?;

    let dims = result.policy.dims;
    println!("policy written to {}", out_path.display());
    println!("expected cost under the worst-case program: {}", result.objective);
    println!(
        "  {} buses x {} periods, {} free gains, {} pinned input rows",
        dims.n, dims.horizon, result.report.free_gains, result.report.pinned_rows
    );
    println!(
        "  {} cut rounds, {} cuts, {} interior-point iterations",
        result.report.cut_rounds, result.report.cuts, result.report.qp_iterations
    );
    println!(
        "  certificate: worst slack {:.3e}, identity error {:.3e}, smallest multiplier {:.3e}",
        result.certificate.max_violation,
        result.certificate.max_identity_error,
        result.certificate.min_multiplier
    );
    println!("  solve time {elapsed:.2} s");

    if let Some(path) = summary_path {
        let mut csv = String::from("key,value\n");
        let _ = writeln!(csv, "objective,{}", csv_num(result.objective));
        let _ = writeln!(csv, "buses,{}", dims.n);
        let _ = writeln!(csv, "periods,{}", dims.horizon);
        let _ = writeln!(csv, "free_gains,{}", result.report.free_gains);
        let _ = writeln!(csv, "pinned_rows,{}", result.report.pinned_rows);
        let _ = writeln!(csv, "cut_rounds,{}", result.report.cut_rounds);
        let _ = writeln!(csv, "cuts,{}", result.report.cuts);
        let _ = writeln!(csv, "qp_iterations,{}", result.report.qp_iterations);
        let _ = writeln!(csv, "certificate_violation,{}", csv_num(result.certificate.max_violation));
        let _ = writeln!(
            csv,
            "certificate_identity_error,{}",
            csv_num(result.certificate.max_identity_error)
        );
        write_file(path, &csv)?;
        println!("summary written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------
// bound
// ---------------------------------------------------------------------

pub fn cmd_bound(config_path: &Path) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(Failure::config)?;
    let spec = cfg.scenario();
    let (net, res, dm) = spec.build().map_err(classify)?;
    let started = Instant::now();
    let bound = compute_lower_bound(&net, &res, &dm, &cfg.synthesis_options()).map_err(classify)?;
    let elapsed = started.elapsed().as_secs_f64();
    if bound.certified {
        println!("certified lower bound on the exact optimum: {}", bound.value);
        println!("  (disturbance coordinates are independent, so the bounding property holds)");
    } else {
        println!("relaxation value: {}", bound.value);
        println!(
            "  note: the disturbance model declares correlation, so this number is \
             reported without a bounding guarantee"
        );
    }
    println!(
        "  {} cut rounds, {} cuts, {} interior-point iterations",
        bound.report.cut_rounds, bound.report.cuts, bound.report.qp_iterations
    );
    println!("  solve time {elapsed:.2} s");
    Ok(())
}

// ---------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------

fn report_block(rep: &SimulationReport, label: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{label}:");
    let _ = writeln!(
        out,
        "  mean cost {} (99% ci half-width {})",
        rep.mean_cost, rep.ci99_halfwidth
    );
    let _ = writeln!(
        out,
        "  {} of {} samples violate a true constraint ({:.4}%)",
        rep.violating_samples,
        rep.samples,
        100.0 * rep.violation_fraction
    );
    let _ = writeln!(
        out,
        "  by kind: voltage {}, stored energy {}, storage power {}, inverter capability {}",
        rep.counts.voltage, rep.counts.energy, rep.counts.power, rep.counts.reactive
    );
    if let Some(w) = &rep.worst {
        let _ = writeln!(
            out,
            "  worst: {} at bus {} period {} (scaled excess {:.3e})",
            w.kind, w.bus, w.t, w.excess
        );
    }
    out
}

fn summary_csv(rep: &SimulationReport) -> String {
    let mut csv = String::from("key,value\n");
    let _ = writeln!(csv, "samples,{}", rep.samples);
    let _ = writeln!(csv, "mean_cost,{}", csv_num(rep.mean_cost));
    let _ = writeln!(csv, "ci99_halfwidth,{}", csv_num(rep.ci99_halfwidth));
    let _ = writeln!(csv, "violating_samples,{}", rep.violating_samples);
    let _ = writeln!(csv, "violation_fraction,{}", csv_num(rep.violation_fraction));
    let _ = writeln!(csv, "voltage_violations,{}", rep.counts.voltage);
    let _ = writeln!(csv, "energy_violations,{}", rep.counts.energy);
    let _ = writeln!(csv, "power_violations,{}", rep.counts.power);
    let _ = writeln!(csv, "reactive_violations,{}", rep.counts.reactive);
    match &rep.worst {
        Some(w) => {
            let _ = writeln!(csv, "worst_kind,{}", w.kind);
            let _ = writeln!(csv, "worst_bus,{}", w.bus);
            let _ = writeln!(csv, "worst_period,{}", w.t);
            let _ = writeln!(csv, "worst_excess,{}", csv_num(w.excess));
        }
        None => {
            let _ = writeln!(csv, "worst_kind,none");
        }
    }
    csv
}

fn bands_csv(rep: &SimulationReport) -> String {
    let mut csv = String::from("bus,period");
    if let Some(first) = rep.bands.first() {
        for level in &first.levels {
            let _ = write!(csv, ",q{:02.0}", level * 100.0);
        }
    }
    csv.push('\n');
    for band in &rep.bands {
        let periods = band.kv.first().map_or(0, |row| row.len());
        for t in 0..periods {
            let _ = write!(csv, "{},{}", band.bus, t);
            for li in 0..band.levels.len() {
                let _ = write!(csv, ",{}", csv_num(band.kv[li][t]));
            }
            csv.push('\n');
        }
    }
    csv
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    config_path: &Path,
    policy_path: Option<&Path>,
    zero_policy: bool,
    samples: Option<usize>,
    seed: Option<u64>,
    fast: Option<usize>,
    out_dir: &Path,
) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(Failure::config)?;
    let spec = cfg.scenario();
    let (net, res, dm) = spec.build().map_err(classify)?;
    let policy = match (policy_path, zero_policy) {
        (Some(path), false) => AffinePolicy::load(path).map_err(classify)?,
        (None, true) => AffinePolicy::zero(res.dims),
        _ => {
            return Err(Failure::config(
                "exactly one of --policy <file> or --zero-policy is required".into(),
            ));
        }
    };
    let opts = SimulationOptions {
        samples: samples.unwrap_or_else(|| cfg.samples()),
        seed: seed.unwrap_or_else(|| cfg.seed()),
        ..Default::default()
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", out_dir.display())))?;
    let rep = simulate_policy(&net, &res, &dm, &policy, &opts).map_err(classify)?;
    print!("{}", report_block(&rep, "design-timescale rollout"));
    write_file(&out_dir.join("simulation_summary.csv"), &summary_csv(&rep))?;
    write_file(&out_dir.join("voltage_bands.csv"), &bands_csv(&rep))?;
    println!(
        "wrote {} and {}",
        out_dir.join("simulation_summary.csv").display(),
        out_dir.join("voltage_bands.csv").display()
    );

    if let Some(substeps) = fast {
        let frep = simulate_fast(&net, &res, &dm, &policy, substeps, FastLaw::UniformInBox, &opts)
            .map_err(classify)?;
        print!(
            "{}",
            report_block(&frep, &format!("fast rollout ({substeps} redraws per period)"))
        );
        write_file(&out_dir.join("fast_summary.csv"), &summary_csv(&frep))?;
        println!("wrote {}", out_dir.join("fast_summary.csv").display());
    }
    Ok(())
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

struct SweepRow {
    theta: f64,
    j_in: f64,
    j_out: f64,
    certified: bool,
}

/// Requested worker count: the `DERFLOW_THREADS` environment variable,
/// else 1.
fn thread_count() -> usize {
    std::env::var("DERFLOW_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

pub fn cmd_sweep(config_path: &Path, out_path: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(Failure::config)?;
    let sweep = cfg.sweep.as_ref().ok_or_else(|| {
        Failure::config("this config has no [sweep] section; add one or use synthesize/bound".into())
    })?;
    if sweep.parameter != "theta" {
        return Err(Failure::config(format!(
            "sweep parameter {:?} is not supported (only \"theta\")",
            sweep.parameter
        )));
    }
    if sweep.grid.is_empty() {
        return Err(Failure::config("sweep grid is empty".into()));
    }
    let ratio = sweep.apparent_ratio.unwrap_or(1.25);
    if ratio <= 0.0 {
        return Err(Failure::config("apparent_ratio must be positive".into()));
    }
    let opts = cfg.synthesis_options();
    let grid = sweep.grid.clone();
    let threads = thread_count().min(grid.len());

    // Independent jobs over grid points, striped across workers.
    let results: Vec<Result<SweepRow, Failure>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..threads {
            let grid = &grid;
            let cfg = &cfg;
            let opts = &opts;
            handles.push(scope.spawn(move || {
                let mut chunk = Vec::new();
                for (i, &theta) in grid.iter().enumerate().skip(w).step_by(threads) {
                    let row = (|| -> Result<SweepRow, Failure> {
                        let spec = cfg.scenario_at_theta(theta, ratio);
                        let (net, res, dm) = spec.build().map_err(classify)?;
                        let syn = synthesize_policy(&net, &res, &dm, opts).map_err(classify)?;
                        let bound =
                            compute_lower_bound(&net, &res, &dm, opts).map_err(classify)?;
                        Ok(SweepRow {
                            theta,
                            j_in: syn.objective,
                            j_out: bound.value,
                            certified: bound.certified,
                        })
                    })();
                    chunk.push((i, row));
                }
                chunk
            }));
        }
        let mut merged: Vec<Option<Result<SweepRow, Failure>>> =
            (0..grid.len()).map(|_| None).collect();
        for handle in handles {
            for (i, row) in handle.join().expect("sweep worker panicked") {
                merged[i] = Some(row);
            }
        }
        merged.into_iter().map(|r| r.expect("sweep point not computed")).collect()
    });

    let mut csv = String::from("theta,j_in,j_out,gap,relative_gap,certified\n");
    println!("theta        j_in          j_out           gap   gap/j_out");
    for row in results {
        let row = row.map_err(|f| Failure {
            code: f.code,
            message: format!("sweep point failed: {}", f.message),
        })?;
        let gap = row.j_in - row.j_out;
        let rel = gap / row.j_out.max(1e-9);
        println!(
            "{:>5} {:>13.6} {:>13.6} {:>12.3e} {:>11.3e}",
            row.theta, row.j_in, row.j_out, gap, rel
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            csv_num(row.theta),
            csv_num(row.j_in),
            csv_num(row.j_out),
            csv_num(gap),
            csv_num(rel),
            row.certified
        );
    }
    if let Some(path) = out_path {
        write_file(path, &csv)?;
        println!("sweep table written to {}", path.display());
    }
    Ok(())
}
