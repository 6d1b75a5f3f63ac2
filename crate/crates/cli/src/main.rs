use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nonconvex_mpc::harness::{self, HarnessError, OutputFormat, RunStatus, Scenario, TrajectoryLog};
use nonconvex_mpc::mpct::MpcMode;

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "mpct", version, about = "MPC for tracking over non-convex output sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop simulations; several scenarios run in parallel.
    Simulate {
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        /// Override the controller mode of every scenario.
        #[arg(long)]
        mode: Option<Mode>,
        /// Override the step limit.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Time two scenarios that differ only in the mode.
    Benchmark {
        #[arg(long)]
        scenario_a: PathBuf,
        #[arg(long)]
        scenario_b: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a scenario file and certify its chart.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    Homeo,
    Normal,
}

impl From<Mode> for MpcMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Standard => MpcMode::Standard,
            Mode::Homeo => MpcMode::Homeo,
            Mode::Normal => MpcMode::Normal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn fail(err: &HarnessError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    })
}

fn summary_line(log: &TrajectoryLog) -> String {
    let s = &log.summary;
    let mut line = format!(
        "{} [{}]: {} after {} steps",
        log.scenario.name,
        log.scenario.mpc.mode.as_str(),
        s.status.as_str(),
        s.steps
    );
    if let Some(off) = s.final_offset {
        line.push_str(&format!(", final offset {off:.4}"));
    }
    line.push_str(&format!(
        ", solve time {:.3} ± {:.3} ms",
        s.mean_solve_time_ms, s.std_solve_time_ms
    ));
    if let Some(f) = &s.failure {
        line.push_str(&format!(", failed at step {}: {}", f.step, f.reason));
    }
    line
}

fn load(path: &Path, mode: Option<Mode>, steps: Option<usize>) -> Result<Scenario, HarnessError> {
    let mut s = harness::load_scenario(path)?;
    if let Some(m) = mode {
        s.mpc.mode = m.into();
    }
    if let Some(n) = steps {
        s.run.steps = n;
    }
    s.validate()?;
    Ok(s)
}

fn simulate(paths: &[PathBuf], mode: Option<Mode>, steps: Option<usize>, out: &Path, format: Format) -> ExitCode {
    let scenarios: Result<Vec<Scenario>, _> = paths.iter().map(|p| load(p, mode, steps)).collect();
    let scenarios = match scenarios {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let results: Vec<Result<TrajectoryLog, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| scope.spawn(move || harness::run_closed_loop(s)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut code = ExitCode::SUCCESS;
    for res in results {
        let log = match res {
            Ok(log) => log,
            Err(e) => return fail(&e),
        };
        match harness::emit(&log, format.into(), out) {
            Ok(path) => println!("{} -> {}", summary_line(&log), path.display()),
            Err(e) => return fail(&e),
        }
        if log.summary.status == RunStatus::Failed {
            code = ExitCode::from(EXIT_RUNTIME);
        }
    }
    code
}

fn benchmark(a: &Path, b: &Path, out: &Path) -> ExitCode {
    let (sa, sb) = match (load(a, None, None), load(b, None, None)) {
        (Ok(sa), Ok(sb)) => (sa, sb),
        (Err(e), _) | (_, Err(e)) => return fail(&e),
    };
    let (report, log_a, log_b) = match harness::benchmark(&sa, &sb) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    for log in [&log_a, &log_b] {
        if let Err(e) = harness::emit(log, OutputFormat::Csv, out) {
            return fail(&e);
        }
        println!("{}", summary_line(log));
    }
    let path = out.join("benchmark.json");
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    if let Err(e) = std::fs::write(&path, json) {
        return fail(&HarnessError::Io(format!("{}: {e}", path.display())));
    }
    println!("{report}");
    if [&log_a, &log_b].iter().any(|l| l.summary.status == RunStatus::Failed) {
        return ExitCode::from(EXIT_RUNTIME);
    }
    ExitCode::SUCCESS
}

fn validate(path: &Path) -> ExitCode {
    let setup = match harness::load_scenario(path).and_then(|s| s.build().map(|setup| (s, setup))) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let (s, setup) = setup;
    match setup.certification {
        Some(c) => println!(
            "{}: valid; chart certified on {} fibers ({} samples each, shortest fiber {:.4})",
            s.name, c.fibers_checked, c.samples_per_fiber, c.min_fiber_length
        ),
        None => println!("{}: valid", s.name),
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            scenarios,
            mode,
            steps,
            out,
            format,
        } => simulate(&scenarios, mode, steps, &out, format),
        Command::Benchmark {
            scenario_a,
            scenario_b,
            out,
        } => benchmark(&scenario_a, &scenario_b, &out),
        Command::Validate { scenario } => validate(&scenario),
    }
}
