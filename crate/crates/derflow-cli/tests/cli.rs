//! End-to-end tests of the `derflow` binary: exit codes, file outputs,
//! and byte-level determinism of everything written to disk.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_derflow"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    cmd.output().expect("binary should launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{ctx}: expected exit {want}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out),
    );
}

/// A small feasible scenario used by most tests (3 buses, 2 periods).
fn micro() -> PathBuf {
    config("micro.toml")
}

// -------------------------------------------------------------------
// validate
// -------------------------------------------------------------------

#[test]
fn validate_accepts_the_bundled_configs() {
    for name in ["micro.toml", "desk.toml", "feeder14.toml"] {
        let out = run(&["validate", config(name).to_str().unwrap()]);
        assert_code(&out, 0, &format!("validate {name}"));
        let text = stdout(&out);
        assert!(text.contains("is valid"), "missing verdict for {name}: {text}");
        assert!(text.contains("buses:"), "missing shape summary for {name}: {text}");
    }
}

#[test]
fn missing_file_exits_two() {
    let out = run(&["validate", "/nonexistent/nowhere.toml"]);
    assert_code(&out, 2, "validate missing file");
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
}

#[test]
fn malformed_toml_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "version = 1\n[network\nbase_kv = 12.0\n").unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    assert_code(&out, 2, "validate malformed toml");
    let err = stderr(&out);
    assert!(err.contains("line"), "diagnostic should name a line: {err}");
}

#[test]
fn unknown_field_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extra.toml");
    let mut text = std::fs::read_to_string(micro()).unwrap();
    text.push_str("\nnot_a_real_key = 5\n");
    std::fs::write(&path, text).unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    assert_code(&out, 2, "validate unknown field");
    assert!(stderr(&out).contains("not_a_real_key"), "stderr: {}", stderr(&out));
}

#[test]
fn wrong_version_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v9.toml");
    let text = std::fs::read_to_string(micro()).unwrap().replacen(
        "version = 1",
        "version = 9",
        1,
    );
    std::fs::write(&path, text).unwrap();
    let out = run(&["validate", path.to_str().unwrap()]);
    assert_code(&out, 2, "validate wrong version");
}

// -------------------------------------------------------------------
// synthesize + policy round trip
// -------------------------------------------------------------------

#[test]
fn synthesize_writes_policy_and_summary_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let micro = micro();
    let mut artifacts: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for rep in 0..2 {
        let policy = dir.path().join(format!("policy{rep}.csv"));
        let summary = dir.path().join(format!("summary{rep}.csv"));
        let out = run(&[
            "synthesize",
            micro.to_str().unwrap(),
            "-o",
            policy.to_str().unwrap(),
            "--summary",
            summary.to_str().unwrap(),
        ]);
        assert_code(&out, 0, "synthesize micro");
        let text = stdout(&out);
        assert!(text.contains("expected cost under the worst-case program"), "{text}");
        artifacts.push((
            std::fs::read(&policy).unwrap(),
            std::fs::read(&summary).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "policy files must be byte-identical");
    assert_eq!(artifacts[0].1, artifacts[1].1, "summary files must be byte-identical");
    let summary = String::from_utf8(artifacts[0].1.clone()).unwrap();
    assert!(summary.contains("objective,"), "summary: {summary}");
    assert!(summary.contains("certificate_violation,"), "summary: {summary}");
}

#[test]
fn infeasible_scenario_exits_one() {
    // An 8 MW deterministic load behind 0.7 ohm drops the voltage far
    // below a +/-1% band; a 10 kW battery cannot lift it for any gains.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hopeless.toml");
    std::fs::write(
        &path,
        r#"
version = 1

[network]
base_kv = 12.0
v_min_pu = 0.99
v_max_pu = 1.01
lines = [{ bus = 1, parent = 0, r_ohm = 0.4, x_ohm = 0.3 }]

[resources]
periods = 2
period_hours = 1.0
start_hour = 11.0
storages = [
    { bus = 1, capacity_mwh = 0.1, p_min_mw = -0.01, p_max_mw = 0.01, initial_mwh = 0.05 },
]

[uncertainty]
loads = [{ bus = 1, peak_mw = 8.0, power_factor = 0.95 }]
load_band = [1.0, 1.0]
pv_law = "uniform"

[solve]
seed = 1
samples = 100
"#,
    )
    .unwrap();
    let out = run(&["synthesize", path.to_str().unwrap(), "-o", dir.path().join("p.csv").to_str().unwrap()]);
    assert_code(&out, 1, "synthesize hopeless scenario");
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
}

// -------------------------------------------------------------------
// simulate
// -------------------------------------------------------------------

#[test]
fn simulate_requires_exactly_one_policy_source() {
    let out = run(&["simulate", micro().to_str().unwrap()]);
    assert_code(&out, 2, "simulate with no policy source");
    assert!(
        stderr(&out).contains("exactly one of"),
        "stderr: {}",
        stderr(&out)
    );

    // Both at once is rejected by argument parsing, also exit 2.
    let out = run(&[
        "simulate",
        micro().to_str().unwrap(),
        "--policy",
        "p.csv",
        "--zero-policy",
    ]);
    assert_code(&out, 2, "simulate with two policy sources");
}

#[test]
fn simulate_round_trips_a_synthesized_policy_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let micro = micro();
    let policy = dir.path().join("policy.csv");
    let out = run(&[
        "synthesize",
        micro.to_str().unwrap(),
        "-o",
        policy.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "synthesize for round trip");

    let mut runs: Vec<(Vec<u8>, Vec<u8>, Vec<u8>)> = Vec::new();
    for rep in 0..2 {
        let out_dir = dir.path().join(format!("sim{rep}"));
        let out = run(&[
            "simulate",
            micro.to_str().unwrap(),
            "--policy",
            policy.to_str().unwrap(),
            "--samples",
            "400",
            "--seed",
            "11",
            "--fast",
            "3",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0, "simulate with synthesized policy");
        let text = stdout(&out);
        assert!(text.contains("design-timescale rollout"), "{text}");
        assert!(text.contains("fast rollout (3 redraws per period)"), "{text}");
        runs.push((
            std::fs::read(out_dir.join("simulation_summary.csv")).unwrap(),
            std::fs::read(out_dir.join("voltage_bands.csv")).unwrap(),
            std::fs::read(out_dir.join("fast_summary.csv")).unwrap(),
        ));
    }
    assert_eq!(runs[0].0, runs[1].0, "summary CSV must be byte-identical across runs");
    assert_eq!(runs[0].1, runs[1].1, "bands CSV must be byte-identical across runs");
    assert_eq!(runs[0].2, runs[1].2, "fast CSV must be byte-identical across runs");

    let summary = String::from_utf8(runs[0].0.clone()).unwrap();
    assert!(summary.contains("samples,400"), "summary: {summary}");
    assert!(summary.contains("mean_cost,"), "summary: {summary}");
    let bands = String::from_utf8(runs[0].1.clone()).unwrap();
    let header = bands.lines().next().unwrap();
    assert!(header.starts_with("bus,period,"), "bands header: {header}");
    assert!(header.contains("q50"), "bands header: {header}");
}

#[test]
fn simulate_zero_policy_runs_without_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        micro().to_str().unwrap(),
        "--zero-policy",
        "--samples",
        "200",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0, "simulate zero policy");
    assert!(dir.path().join("simulation_summary.csv").exists());
    assert!(dir.path().join("voltage_bands.csv").exists());
}

#[test]
fn simulate_rejects_a_corrupt_policy_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("garbage.csv");
    std::fs::write(&path, "this,is,not\na,policy,file\n").unwrap();
    let out = run(&[
        "simulate",
        micro().to_str().unwrap(),
        "--policy",
        path.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 2, "simulate corrupt policy");
}

// -------------------------------------------------------------------
// sweep
// -------------------------------------------------------------------

#[test]
fn sweep_without_section_exits_two() {
    let out = run(&["sweep", micro().to_str().unwrap()]);
    assert_code(&out, 2, "sweep without [sweep] section");
    assert!(stderr(&out).contains("[sweep]"), "stderr: {}", stderr(&out));
}

#[test]
fn sweep_writes_a_monotone_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweeping.toml");
    let mut text = std::fs::read_to_string(micro()).unwrap();
    text.push_str("\n[sweep]\nparameter = \"theta\"\ngrid = [0.0, 0.5]\napparent_ratio = 1.25\n");
    std::fs::write(&path, text).unwrap();

    let csv_path = dir.path().join("table.csv");
    let out = run(&["sweep", path.to_str().unwrap(), "-o", csv_path.to_str().unwrap()]);
    assert_code(&out, 0, "sweep two points");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "theta,j_in,j_out,gap,relative_gap,certified"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per grid point: {csv}");
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6, "row: {row}");
        let j_in: f64 = fields[1].parse().unwrap();
        let j_out: f64 = fields[2].parse().unwrap();
        assert!(
            j_out <= j_in + 1e-6 * (1.0 + j_in.abs()),
            "bound must not exceed the designed cost: {row}"
        );
    }
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweeping.toml");
    let mut text = std::fs::read_to_string(micro()).unwrap();
    text.push_str("\n[sweep]\nparameter = \"theta\"\ngrid = [0.0, 0.25, 0.5]\n");
    std::fs::write(&path, text).unwrap();

    let mut tables = Vec::new();
    for threads in ["1", "3"] {
        let csv_path = dir.path().join(format!("table{threads}.csv"));
        let mut cmd = bin();
        cmd.args(["sweep", path.to_str().unwrap(), "-o", csv_path.to_str().unwrap()]);
        cmd.env("DERFLOW_THREADS", threads);
        let out = cmd.output().expect("binary should launch");
        assert_code(&out, 0, &format!("sweep with {threads} threads"));
        tables.push(std::fs::read(&csv_path).unwrap());
    }
    assert_eq!(tables[0], tables[1], "thread count must not change the table");
}

// -------------------------------------------------------------------
// bound
// -------------------------------------------------------------------

#[test]
fn bound_reports_certified_wording_for_independent_coordinates() {
    let out = run(&["bound", micro().to_str().unwrap()]);
    assert_code(&out, 0, "bound micro");
    let text = stdout(&out);
    assert!(
        text.contains("certified lower bound") || text.contains("relaxation value"),
        "{text}"
    );
}
