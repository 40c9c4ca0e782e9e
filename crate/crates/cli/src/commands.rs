//! Subcommand implementations and output writers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gbp_ba::dataset::{self, inject_outliers, perturb, OutlierMode, PerturbParams, ProblemSpec};
use gbp_ba::engine::with_workers;
use gbp_ba::experiments::{
    classification_trace, convergence_sweep, incremental_replay, outlier_problem, outlier_study,
    ColdStart, ExperimentError, IncrementalParams, OutlierParams, Scenario, SweepParams,
};
use gbp_ba::oracle::{lm_solve, LmParams};
use gbp_ba::{solve, FactorGraph, GraphConfig, ScheduleParams};
use serde::Serialize;
use serde_json::json;

use crate::{
    Cli, ColdArg, Command, GenArgs, IncrementalArgs, InputArgs, OutlierArgs, OutlierModeArg,
    RunArgs, ScheduleArgs, SolveArgs, SweepArgs, EXIT_INVARIANT, EXIT_IO, EXIT_USAGE,
};

/// Version tag of every JSON summary and CSV layout written here.
pub const SCHEMA_VERSION: u32 = 1;
const WALL_TIME_NOTE: &str = "machine-local; not comparable across hardware";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Invariant(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::Invariant(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl From<dataset::DatasetError> for CliError {
    fn from(e: dataset::DatasetError) -> Self {
        match e {
            dataset::DatasetError::Degenerate(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Dataset(d) => d.into(),
            ExperimentError::Graph(g) => CliError::Io(g.to_string()),
            ExperimentError::Invalid(m) => CliError::Usage(m),
        }
    }
}

impl From<gbp_ba::graph::GraphError> for CliError {
    fn from(e: gbp_ba::graph::GraphError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let workers = a.run.workers;
            in_pool(workers, || cmd_gen(&a))
        }
        Command::Solve(a) => in_pool(a.run.workers, || cmd_solve(&a)),
        Command::Incremental(a) => in_pool(a.run.workers, || cmd_incremental(&a)),
        Command::Sweep(a) => in_pool(a.run.workers, || cmd_sweep(&a)),
        Command::Outliers(a) => in_pool(a.run.workers, || cmd_outliers(&a)),
    }
}

fn in_pool(workers: u64, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    with_workers(workers as usize, f)
}

fn mode(m: OutlierModeArg) -> OutlierMode {
    match m {
        OutlierModeArg::Reassign => OutlierMode::Reassign,
        OutlierModeArg::Uniform => OutlierMode::Uniform,
    }
}

fn out_dir(run: &RunArgs) -> Result<PathBuf> {
    fs::create_dir_all(&run.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", run.out.display())))?;
    Ok(run.out.clone())
}

fn schedule(args: &ScheduleArgs, base: ScheduleParams) -> Result<ScheduleParams> {
    let mut s = base;
    if let Some(v) = args.beta {
        s.beta = v;
    }
    if let Some(v) = args.damping {
        s.damping = v;
    }
    if let Some(v) = args.max_iters {
        s.max_iters = v;
    }
    if let Some(v) = args.are_target {
        s.are_target = v;
    }
    s.validate().map_err(CliError::Usage)?;
    Ok(s)
}

fn graph_config(args: &ScheduleArgs) -> Result<GraphConfig> {
    let mut c = GraphConfig::default();
    if let Some(n) = args.nsigma {
        if !(n > 0.0) {
            return Err(CliError::Usage(format!("nsigma {n} must be positive")));
        }
        c.huber_nsigma = n;
    }
    Ok(c)
}

/// Loads a native file, or a BAL file when the native header is absent.
fn load_input(path: &Path) -> Result<ProblemSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let problem = if text.trim_start().starts_with(dataset::FORMAT_MAGIC) {
        dataset::from_native_str(&text)
    } else {
        dataset::parse_bal(&text)
    };
    problem.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Initial problem to solve: the file as given, or a perturbed synthetic scene.
fn initial_problem(input: &InputArgs) -> Result<ProblemSpec> {
    match &input.input {
        Some(path) => load_input(path),
        None => Ok(Scenario::desk(input.kf as usize, input.lm as usize, input.seed).problem()?),
    }
}

/// Ground-truth problem for the experiment drivers.
fn truth_problem(input: &InputArgs) -> Result<ProblemSpec> {
    match &input.input {
        Some(path) => {
            let p = load_input(path)?;
            if p.has_ground_truth() {
                Ok(p.at_ground_truth()?)
            } else {
                Ok(p)
            }
        }
        None => Ok(Scenario::desk(input.kf as usize, input.lm as usize, input.seed).truth()?),
    }
}

fn scenario_perturb(input: &InputArgs) -> PerturbParams {
    Scenario::desk(input.kf as usize, input.lm as usize, input.seed).perturb
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialise");
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn finite_or_invariant(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!("{what} is {v}")))
    }
}

fn schedule_json(s: &ScheduleParams, g: &GraphConfig) -> serde_json::Value {
    json!({
        "beta": s.beta,
        "damping": s.damping,
        "undamped_window": s.undamped_window,
        "relin_cooldown": s.relin_cooldown,
        "prior_weaken_iters": s.prior_weaken_iters,
        "prior_final_scale": s.prior_final_scale,
        "max_iters": s.max_iters,
        "are_target": s.are_target,
        "huber_nsigma": if g.huber_nsigma.is_finite() { json!(g.huber_nsigma) } else { json!(null) },
    })
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    if !(0.0..=0.5).contains(&a.outliers) {
        return Err(CliError::Usage(format!(
            "outlier fraction {} outside [0, 0.5]",
            a.outliers
        )));
    }
    let mut scenario = Scenario::desk(a.kf as usize, a.lm as usize, a.seed);
    scenario.perturb.keyframe_sigma = a.kf_sigma;
    let mut problem = perturb(&scenario.truth()?, &scenario.perturb)?;
    if a.outliers > 0.0 {
        problem = inject_outliers(&problem, a.outliers, mode(a.outlier_mode), a.seed)?.0;
    }
    let path = match &a.file {
        Some(p) => p.clone(),
        None => out_dir(&a.run)?.join("problem.txt"),
    };
    dataset::save(&problem, &path)?;
    println!(
        "wrote {} ({} keyframes, {} landmarks, {} measurements, {} outliers)",
        path.display(),
        problem.keyframes.len(),
        problem.landmarks.len(),
        problem.measurements.len(),
        problem.outlier_labels().iter().filter(|o| **o).count()
    );
    Ok(())
}

#[derive(Serialize)]
struct TraceCsvRow {
    iteration: usize,
    are_px: f64,
    energy: f64,
    relinearised: usize,
    max_message_delta: f64,
}

#[derive(Serialize)]
struct LmCsvRow {
    step: usize,
    are_px: f64,
    cost: f64,
}

fn cmd_solve(a: &SolveArgs) -> Result<()> {
    let problem = initial_problem(&a.input)?;
    let sched = schedule(&a.schedule, ScheduleParams::default())?;
    let config = graph_config(&a.schedule)?;
    let dir = out_dir(&a.run)?;
    let mut graph = FactorGraph::build(&problem, &config)?;
    let start_graph = graph.clone();

    let t0 = Instant::now();
    let report = solve(&mut graph, &sched);
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    finite_or_invariant("final ARE", report.final_are)?;
    if report.psd_violations > 0 {
        return Err(CliError::Invariant(format!(
            "{} beliefs lost positive semi-definiteness",
            report.psd_violations
        )));
    }
    let rows: Vec<TraceCsvRow> = report
        .trace
        .iter()
        .map(|t| TraceCsvRow {
            iteration: t.iteration,
            are_px: t.are,
            energy: t.energy,
            relinearised: t.relinearised,
            max_message_delta: t.max_message_delta,
        })
        .collect();
    write_csv(&dir.join("trace.csv"), &rows)?;

    let mut summary = json!({
        "schema": format!("gbp-ba/solve/{SCHEMA_VERSION}"),
        "solver": "gbp",
        "keyframes": problem.keyframes.len(),
        "landmarks": problem.landmarks.len(),
        "measurements": problem.measurements.len(),
        "converged": report.converged,
        "stop": format!("{:?}", report.stop),
        "iterations": report.iterations,
        "initial_are_px": report.trace[0].are,
        "final_are_px": report.final_are,
        "singular_messages": report.singular_messages,
        "behind_camera_relinearisations": report.behind_camera_relins,
        "schedule": schedule_json(&sched, &config),
        "wall_time_ms": wall_ms,
        "wall_time_note": WALL_TIME_NOTE,
    });
    if a.baseline.is_some() {
        let params = LmParams {
            are_target: sched.are_target,
            ..LmParams::default()
        };
        let t0 = Instant::now();
        let lm = lm_solve(&start_graph, &params);
        let lm_ms = t0.elapsed().as_secs_f64() * 1e3;
        let rows: Vec<LmCsvRow> = lm
            .are_trace
            .iter()
            .zip(&lm.cost_trace)
            .enumerate()
            .map(|(step, (&are_px, &cost))| LmCsvRow { step, are_px, cost })
            .collect();
        write_csv(&dir.join("lm_trace.csv"), &rows)?;
        summary["baseline"] = json!({
            "solver": "lm",
            "converged": lm.converged,
            "steps": lm.steps,
            "accepted_steps": lm.accepted,
            "final_are_px": lm.final_are,
            "wall_time_ms": lm_ms,
            "wall_time_note": WALL_TIME_NOTE,
        });
    }
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "gbp: converged={} iterations={} final ARE {:.3} px",
        report.converged, report.iterations, report.final_are
    );
    if let Some(b) = summary.get("baseline") {
        println!(
            "lm: converged={} steps={} final ARE {:.3} px",
            b["converged"], b["steps"], b["final_are_px"]
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct IncrementalCsvRow {
    keyframe: usize,
    new_landmarks: usize,
    new_measurements: usize,
    gbp_iterations: usize,
    gbp_converged: bool,
    gbp_are_px: f64,
    cold_iterations: Option<usize>,
    cold_converged: Option<bool>,
    lm_steps: Option<usize>,
    lm_converged: Option<bool>,
}

fn cmd_incremental(a: &IncrementalArgs) -> Result<()> {
    let truth = truth_problem(&a.input)?;
    let defaults = IncrementalParams::default();
    let sched = schedule(&a.schedule, defaults.schedule)?;
    let config = graph_config(&a.schedule)?;
    let dir = out_dir(&a.run)?;
    let cold = match a.cold {
        ColdArg::Perturbed => ColdStart::Perturbed(scenario_perturb(&a.input)),
        ColdArg::Restart => ColdStart::Restart,
    };
    let params = IncrementalParams {
        schedule: sched,
        graph: config,
        cold: Some(cold),
        lm: Some(LmParams {
            are_target: sched.are_target,
            fix_landmarks_steps: 3,
            ..LmParams::default()
        }),
        ..defaults
    };
    let t0 = Instant::now();
    let report = incremental_replay(&truth, &params)?;
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let rows: Vec<IncrementalCsvRow> = report
        .rows
        .iter()
        .map(|r| IncrementalCsvRow {
            keyframe: r.keyframe,
            new_landmarks: r.new_landmarks,
            new_measurements: r.new_measurements,
            gbp_iterations: r.gbp_iterations,
            gbp_converged: r.gbp_converged,
            gbp_are_px: r.gbp_are,
            cold_iterations: r.cold_iterations,
            cold_converged: r.cold_converged,
            lm_steps: r.lm_steps,
            lm_converged: r.lm_converged,
        })
        .collect();
    write_csv(&dir.join("incremental.csv"), &rows)?;
    let cold_total: usize = report.rows.iter().filter_map(|r| r.cold_iterations).sum();
    let cold_capped = report
        .rows
        .iter()
        .filter(|r| r.cold_converged == Some(false))
        .count();
    let fast = report.rows.iter().filter(|r| r.gbp_iterations < 10).count();
    let summary = json!({
        "schema": format!("gbp-ba/incremental/{SCHEMA_VERSION}"),
        "additions": report.rows.len(),
        "initial_iterations": report.initial_iterations,
        "incremental_total_iterations": report.total_iterations,
        "cold_total_iterations": cold_total,
        "cold_solves_at_cap": cold_capped,
        "cold_start": format!("{:?}", a.cold).to_lowercase(),
        "additions_under_10_iterations": fast,
        "schedule": schedule_json(&sched, &config),
        "wall_time_ms": wall_ms,
        "wall_time_note": WALL_TIME_NOTE,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "incremental {} iterations vs cold {} ({} additions, {} under 10 iterations)",
        report.total_iterations,
        cold_total,
        report.rows.len(),
        fast
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepCsvRow {
    noise_m: f64,
    trials: usize,
    gbp_successes: usize,
    gbp_fraction: f64,
    lm_successes: usize,
    lm_fraction: f64,
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    if a.trials == 0 || a.noise.iter().any(|n| !(*n >= 0.0)) {
        return Err(CliError::Usage(
            "need trials > 0 and non-negative noise levels".into(),
        ));
    }
    let truth = truth_problem(&a.input)?;
    let sched = schedule(
        &a.schedule,
        ScheduleParams {
            max_iters: 300,
            ..ScheduleParams::default()
        },
    )?;
    let config = graph_config(&a.schedule)?;
    let dir = out_dir(&a.run)?;
    let params = SweepParams {
        noise_levels: a.noise.clone(),
        trials: a.trials,
        seed: a.input.seed,
        schedule: sched,
        graph: config,
        landmark_init: scenario_perturb(&a.input).landmark_init,
        lm: Some(LmParams {
            are_target: sched.are_target,
            ..LmParams::default()
        }),
    };
    let t0 = Instant::now();
    let rows = convergence_sweep(&truth, &params)?;
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let csv_rows: Vec<SweepCsvRow> = rows
        .iter()
        .map(|r| SweepCsvRow {
            noise_m: r.noise,
            trials: r.trials,
            gbp_successes: r.gbp_successes,
            gbp_fraction: r.gbp_fraction(),
            lm_successes: r.lm_successes.unwrap_or(0),
            lm_fraction: r.lm_fraction().unwrap_or(0.0),
        })
        .collect();
    write_csv(&dir.join("sweep.csv"), &csv_rows)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "schema": format!("gbp-ba/sweep/{SCHEMA_VERSION}"),
            "levels": rows.len(),
            "trials": a.trials,
            "schedule": schedule_json(&sched, &config),
            "wall_time_ms": wall_ms,
            "wall_time_note": WALL_TIME_NOTE,
        }),
    )?;
    for r in &csv_rows {
        println!(
            "noise {:.3} m: gbp {:.2} lm {:.2}",
            r.noise_m, r.gbp_fraction, r.lm_fraction
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct OutlierCsvRow {
    fraction: f64,
    variant: &'static str,
    converged: bool,
    iterations: usize,
    final_are_px: f64,
    inlier_are_px: f64,
    precision: Option<f64>,
    recall: Option<f64>,
}

#[derive(Serialize)]
struct ClassificationCsvRow {
    fraction: f64,
    iteration: usize,
    precision: f64,
    recall: f64,
    are_px: f64,
    inlier_are_px: f64,
}

fn cmd_outliers(a: &OutlierArgs) -> Result<()> {
    if a.outliers.iter().any(|f| !(0.0..=0.5).contains(f)) {
        return Err(CliError::Usage(
            "outlier fractions must lie in [0, 0.5]".into(),
        ));
    }
    let truth = truth_problem(&a.input)?;
    let sched = schedule(&a.schedule, ScheduleParams::default())?;
    let config = graph_config(&a.schedule)?;
    let dir = out_dir(&a.run)?;
    let params = OutlierParams {
        fractions: a.outliers.clone(),
        mode: mode(a.outlier_mode),
        seed: a.input.seed,
        schedule: sched,
        lm: LmParams {
            are_target: sched.are_target,
            ..LmParams::default()
        },
        huber_nsigma: config.huber_nsigma,
        perturb: scenario_perturb(&a.input),
    };
    let t0 = Instant::now();
    let rows = outlier_study(&truth, &params)?;
    let mut trace = Vec::new();
    for &fraction in &params.fractions {
        let problem = outlier_problem(&truth, fraction, &params)?;
        let labels = problem.outlier_labels();
        let mut g = FactorGraph::build(&problem, &config)?;
        for r in classification_trace(&mut g, &labels, &sched, sched.max_iters) {
            trace.push(ClassificationCsvRow {
                fraction,
                iteration: r.iteration,
                precision: r.precision,
                recall: r.recall,
                are_px: r.are,
                inlier_are_px: r.inlier_are,
            });
        }
    }
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let csv_rows: Vec<OutlierCsvRow> = rows
        .iter()
        .map(|r| OutlierCsvRow {
            fraction: r.fraction,
            variant: r.variant.name(),
            converged: r.converged,
            iterations: r.iterations,
            final_are_px: r.final_are,
            inlier_are_px: r.inlier_are,
            precision: r.precision,
            recall: r.recall,
        })
        .collect();
    write_csv(&dir.join("outliers.csv"), &csv_rows)?;
    write_csv(&dir.join("classification.csv"), &trace)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "schema": format!("gbp-ba/outliers/{SCHEMA_VERSION}"),
            "fractions": a.outliers,
            "mode": format!("{:?}", a.outlier_mode).to_lowercase(),
            "schedule": schedule_json(&sched, &config),
            "wall_time_ms": wall_ms,
            "wall_time_note": WALL_TIME_NOTE,
        }),
    )?;
    for r in &csv_rows {
        println!(
            "fraction {:.2} {:<10} converged={} inlier ARE {:.3} px",
            r.fraction, r.variant, r.converged, r.inlier_are_px
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_overrides() -> ScheduleArgs {
        ScheduleArgs {
            beta: None,
            damping: None,
            nsigma: None,
            max_iters: None,
            are_target: None,
        }
    }

    #[test]
    fn overrides_apply_and_defaults_stay() {
        let args = ScheduleArgs {
            damping: Some(0.2),
            max_iters: Some(7),
            ..no_overrides()
        };
        let s = schedule(&args, ScheduleParams::default()).unwrap();
        assert_eq!((s.damping, s.max_iters, s.beta), (0.2, 7, 0.01));
    }

    #[test]
    fn invalid_overrides_are_usage_errors() {
        let bad = ScheduleArgs {
            damping: Some(1.0),
            ..no_overrides()
        };
        assert_eq!(
            schedule(&bad, ScheduleParams::default())
                .unwrap_err()
                .code(),
            EXIT_USAGE
        );
        let bad = ScheduleArgs {
            nsigma: Some(-1.0),
            ..no_overrides()
        };
        assert_eq!(graph_config(&bad).unwrap_err().code(), EXIT_USAGE);
        let off = ScheduleArgs {
            nsigma: Some(f64::INFINITY),
            ..no_overrides()
        };
        assert!(graph_config(&off).unwrap().huber_nsigma.is_infinite());
    }

    #[test]
    fn error_codes() {
        let io: CliError = dataset::DatasetError::Invalid("x".into()).into();
        assert_eq!(io.code(), EXIT_IO);
        assert_eq!(CliError::Invariant("x".into()).code(), EXIT_INVARIANT);
    }
}
