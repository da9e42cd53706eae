//! `w99sim`: seeded highway microsimulation, desired-speed calibration, and
//! TTC criticality analysis over JSON configs and CSV/JSON outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or invalid input,
//! 3 runtime failure (congestion abort, failed calibration). Diagnostics go
//! to stderr, controlled by the `W99_LOG` env var (error/warn/info/debug);
//! data outputs go to files only, each written atomically.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use w99sim::calib::{calibrate, CalibrationProblem, CalibrationResult, NmOptions};
use w99sim::sim::{run, Recording, SimConfig, SimOutput};
use w99sim::sweep::{run_sweep, SweepSpec, SweepTable, W99ParamId};
use w99sim::trajdata::{
    observed_speeds, parse_dataset, serialize_dataset, Region, TrajectoryDataset,
};
use w99sim::Error;

#[derive(Parser)]
#[command(name = "w99sim", version, about, propagate_version = true)]
struct Cli {
    /// Worker thread cap for calibration restarts and sweep grid points.
    /// Results are identical for any value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded simulation and write per-vehicle statistics.
    Simulate(SimulateArgs),
    /// Fit the per-class desired-speed distributions to recorded mean speeds.
    Calibrate(CalibrateArgs),
    /// Sweep one car-following parameter and tabulate TTC aggregates.
    Sensitivity(SensitivityArgs),
    /// Recompute TTC statistics for every vehicle in a trajectory dataset.
    Metrics(MetricsArgs),
    /// Check a trajectory dataset against the format invariants.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (JSON); omitted fields take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Destination for the trajectory dataset (JSON). Omit to skip
    /// trajectory recording entirely.
    #[arg(long)]
    out_traj: Option<PathBuf>,
    /// Destination for per-vehicle statistics (CSV).
    #[arg(long)]
    out_stats: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Recorded trajectory dataset (JSON) supplying observed mean speeds.
    #[arg(long)]
    data: PathBuf,
    /// Base simulation config (JSON) for objective evaluations.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Independent optimizer restarts (at least 1).
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    /// Master seed for the uniform initial-point draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON path. A per-restart CSV lands next to it with the
    /// extension swapped to .csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SensitivityArgs {
    /// Parameter to vary: cc0 through cc9.
    #[arg(long, value_parser = parse_param)]
    param: W99ParamId,
    /// First grid value. Defaults to the parameter's documented range start.
    #[arg(long, allow_negative_numbers = true)]
    start: Option<f64>,
    /// Last grid value. Defaults to the parameter's documented range end.
    #[arg(long, allow_negative_numbers = true)]
    end: Option<f64>,
    /// Grid size.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Fraction of cars assigned the altered parameter set.
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    /// Base simulation config (JSON). Defaults to the stock setup at a
    /// 1200 s horizon.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed. The same seed is reused at every grid
    /// value.
    #[arg(long)]
    seed: Option<u64>,
    /// Destination table (CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Trajectory dataset (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Destination for per-vehicle TTC statistics (CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Trajectory dataset (JSON).
    #[arg(long)]
    data: PathBuf,
}

fn parse_param(s: &str) -> Result<W99ParamId, String> {
    s.parse::<W99ParamId>().map_err(|e| e.to_string())
}

/// A classified failure carrying its process exit code.
enum Failure {
    Usage(String),
    Input(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::Validation(_) => {
                Failure::Input(e.to_string())
            }
            Error::Congestion { .. }
            | Error::DegenerateDensity(_)
            | Error::OptimizerInit(_)
            | Error::CalibrationFailed(_)
            | Error::Internal(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("W99_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version render on stdout and succeed; everything else
            // is a usage error.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if cli.jobs == Some(0) {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Calibrate(args) => cmd_calibrate(args, cli.jobs),
        Command::Sensitivity(args) => cmd_sensitivity(args, cli.jobs),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    if config.analysis_window_is_empty() {
        log::warn!(
            "horizon {} s does not extend past warmup {} s; outputs will be empty",
            config.horizon_s,
            config.warmup_s
        );
    }
    let recording = if args.out_traj.is_some() {
        Recording::Full
    } else {
        Recording::StatsOnly
    };
    let output = run(&config, recording)?;
    write_atomic(&args.out_stats, stats_csv(&output).as_bytes())?;
    if let Some(path) = &args.out_traj {
        let text = serialize_dataset(&output.trajectories)?;
        write_atomic(path, text.as_bytes())?;
    }
    log::info!(
        "simulated {} s: {} vehicles admitted, {} completed, {} stats rows",
        config.horizon_s,
        output.meta.admitted_car + output.meta.admitted_truck,
        output.meta.completed,
        output.stats.len()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs, jobs: Option<usize>) -> Result<(), Failure> {
    if args.restarts == 0 {
        return Err(Failure::Usage("--restarts must be at least 1".into()));
    }
    let base = load_config(args.config.as_deref())?;
    base.validate()?;
    let dataset = load_dataset(&args.data)?;
    let observed = observed_speeds(&dataset, &Region::from(&base.network));
    if observed.car_speeds.is_empty() && observed.truck_speeds.is_empty() {
        return Err(Failure::Input(format!(
            "{}: no tracks produce a mean speed inside the measurement region",
            args.data.display()
        )));
    }
    log::info!(
        "calibrating against {} car and {} truck mean speeds, {} restarts",
        observed.car_speeds.len(),
        observed.truck_speeds.len(),
        args.restarts
    );
    let problem = CalibrationProblem::new(observed, base);
    let options = NmOptions::default();
    let result = with_pool(jobs, || {
        calibrate(&problem, args.restarts, args.seed, &options)
    })??;
    let mut json = serde_json::to_string_pretty(&result)
        .map_err(|e| Failure::Runtime(format!("result serialization: {e}")))?;
    json.push('\n');
    write_atomic(&args.out, json.as_bytes())?;
    write_atomic(
        &args.out.with_extension("csv"),
        runs_csv(&result).as_bytes(),
    )?;
    log::info!(
        "best objective {:.6} from restart {}",
        result.objective,
        result.best_restart
    );
    Ok(())
}

fn cmd_sensitivity(args: SensitivityArgs, jobs: Option<usize>) -> Result<(), Failure> {
    if args.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    if !(args.fraction.is_finite() && (0.0..=1.0).contains(&args.fraction)) {
        return Err(Failure::Usage(format!(
            "--fraction must lie in [0, 1], got {}",
            args.fraction
        )));
    }
    let mut base = match args.config.as_deref() {
        Some(path) => load_config(Some(path))?,
        // Desk-scale default: the stock setup over a 1200 s horizon.
        None => SimConfig {
            horizon_s: 1200.0,
            ..SimConfig::default()
        },
    };
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    base.validate()?;
    let (range_start, range_end) = args.param.sweep_range();
    let spec = SweepSpec {
        param: args.param,
        start: args.start.unwrap_or(range_start),
        end: args.end.unwrap_or(range_end),
        steps: args.steps,
        fraction: args.fraction,
        base,
    };
    // The base config is already vetted, so a validation failure here can
    // only mean the requested grid violates the parameter's sign rules.
    if let Err(e) = spec.validate() {
        return Err(Failure::Usage(e.to_string()));
    }
    let table = with_pool(jobs, || run_sweep(&spec))??;
    write_atomic(&args.out, sweep_csv(&table).as_bytes())?;
    let failed = table.rows.iter().filter(|r| r.failed).count();
    log::info!(
        "swept {} over [{}, {}] in {} steps ({} failed rows)",
        spec.param,
        spec.start,
        spec.end,
        spec.steps,
        failed
    );
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data)?;
    let series = w99sim::metrics::ttc_series(&dataset);
    let mut csv = String::from("id,min_ttc_s,mean_ttc_s,n_defined_samples\n");
    for s in &series {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            s.id,
            fmt_f64(s.min_ttc),
            fmt_f64(s.mean_ttc),
            s.samples.len()
        );
    }
    write_atomic(&args.out, csv.as_bytes())?;
    log::info!(
        "TTC defined for {} of {} tracks",
        series.len(),
        dataset.tracks.len()
    );
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data)?;
    let counts = dataset.class_counts();
    let mut parts: Vec<String> = counts
        .iter()
        .map(|(class, n)| format!("{class} {n}"))
        .collect();
    if parts.is_empty() {
        parts.push("no tracks".into());
    }
    println!(
        "ok: {} tracks ({}), {} occlusions",
        dataset.tracks.len(),
        parts.join(", "),
        dataset.occlusions.len()
    );
    Ok(())
}

/// Reads and parses a simulation config, or returns the stock one.
fn load_config(path: Option<&Path>) -> Result<SimConfig, Failure> {
    let Some(path) = path else {
        return Ok(SimConfig::default());
    };
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<TrajectoryDataset, Failure> {
    let text = read_file(path)?;
    let dataset =
        parse_dataset(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    dataset
        .validate()
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(dataset)
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Writes the full contents or nothing: temp file in the target directory,
/// then atomic rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let describe = |e: &dyn std::fmt::Display| Failure::Input(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::Builder::new()
        .prefix(".w99sim-")
        .tempfile_in(parent)
        .map_err(|e| describe(&e))?;
    tmp.write_all(bytes).map_err(|e| describe(&e))?;
    tmp.persist(path).map_err(|e| describe(&e))?;
    Ok(())
}

/// Runs `work` on a thread pool capped at `jobs` workers. Without the
/// `parallel` feature the cap is ignored and the work runs in place.
fn with_pool<T: Send>(jobs: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match jobs {
        None => Ok(work()),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(work))
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}"))),
        #[cfg(not(feature = "parallel"))]
        Some(n) => {
            if n > 1 {
                log::warn!("built without the parallel feature; running sequentially");
            }
            Ok(work())
        }
    }
}

/// Fixed-point float with 6 significant digits, `.` separator. Values whose
/// integer part already has 6 digits keep it intact.
fn fmt_f64(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let decimals = (5 - x.abs().log10().floor() as i32).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn stats_csv(output: &SimOutput) -> String {
    let mut csv = String::from("id,class,mean_speed_kmh,min_ttc_s,mean_ttc_s,completed\n");
    for s in &output.stats {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            s.id,
            s.class,
            fmt_f64(s.mean_speed_kmh),
            fmt_opt(s.min_ttc_s),
            fmt_opt(s.mean_ttc_s),
            s.completed
        );
    }
    csv
}

fn runs_csv(result: &CalibrationResult) -> String {
    let mut csv =
        String::from("restart,mu_car_kmh,sigma_car_kmh,mu_truck_kmh,sigma_truck_kmh,objective\n");
    for run in &result.runs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            run.restart,
            fmt_f64(run.theta.mu_car_kmh),
            fmt_f64(run.theta.sigma_car_kmh),
            fmt_f64(run.theta.mu_truck_kmh),
            fmt_f64(run.theta.sigma_truck_kmh),
            fmt_f64(run.objective)
        );
    }
    csv
}

fn sweep_csv(table: &SweepTable) -> String {
    let mut csv = String::from("value,min_mean_ttc_s,min_min_ttc_s,n_altered,failed\n");
    for row in &table.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt_f64(row.value),
            fmt_opt(row.min_mean_ttc_s),
            fmt_opt(row.min_min_ttc_s),
            row.n_altered,
            row.failed
        );
    }
    csv
}
