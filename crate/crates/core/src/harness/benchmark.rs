use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::run::{run_closed_loop, RunStatus, TrajectoryLog};
use super::scenario::Scenario;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub scenario: String,
    pub mode: String,
    pub status: RunStatus,
    pub steps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl TimingRow {
    fn of(log: &TrajectoryLog) -> Self {
        Self {
            scenario: log.scenario.name.clone(),
            mode: log.scenario.mpc.mode.as_str().to_string(),
            status: log.summary.status,
            steps: log.summary.steps,
            mean_ms: log.summary.mean_solve_time_ms,
            std_ms: log.summary.std_solve_time_ms,
        }
    }
}

/// Per-step solve time of two runs that differ only in the MPC mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub a: TimingRow,
    pub b: TimingRow,
    /// `b.mean_ms / a.mean_ms`, rounded to three decimals.
    pub ratio: f64,
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>8} {:>12} {:>12}",
            "mode", "steps", "mean [ms]", "std [ms]"
        )?;
        for row in [&self.a, &self.b] {
            writeln!(
                f,
                "{:<10} {:>8} {:>12.4} {:>12.4}",
                row.mode, row.steps, row.mean_ms, row.std_ms
            )?;
        }
        write!(f, "ratio {}/{}: {:.3}", self.b.mode, self.a.mode, self.ratio)
    }
}

pub fn round3(v: f64) -> f64 {
    (v * 1e3).round() / 1e3
}

/// Fails unless the scenarios agree in everything but their name and mode.
pub fn check_pair(a: &Scenario, b: &Scenario) -> Result<(), HarnessError> {
    let strip = |s: &Scenario| {
        let mut v = serde_json::to_value(s).expect("scenarios serialize");
        if let Value::Object(map) = &mut v {
            map.remove("name");
            if let Some(Value::Object(mpc)) = map.get_mut("mpc") {
                mpc.remove("mode");
            }
        }
        v
    };
    let (va, vb) = (strip(a), strip(b));
    match first_difference(&va, &vb, String::new()) {
        None => Ok(()),
        Some(path) => Err(HarnessError::invalid(
            "scenario-b",
            format!("differs from scenario-a beyond the mode, at {path}"),
        )),
    }
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<String> {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => first_difference(x, y, sub),
                    _ => Some(sub),
                }
            })
        }
        _ if a == b => None,
        _ => Some(if path.is_empty() { ".".into() } else { path }),
    }
}

/// Runs both scenarios one after the other and compares their timings.
pub fn benchmark(a: &Scenario, b: &Scenario) -> Result<(BenchmarkReport, TrajectoryLog, TrajectoryLog), HarnessError> {
    check_pair(a, b)?;
    let log_a = run_closed_loop(a)?;
    let log_b = run_closed_loop(b)?;
    let report = report(&log_a, &log_b);
    Ok((report, log_a, log_b))
}

pub fn report(log_a: &TrajectoryLog, log_b: &TrajectoryLog) -> BenchmarkReport {
    let a = TimingRow::of(log_a);
    let b = TimingRow::of(log_b);
    let ratio = if a.mean_ms > 0.0 {
        round3(b.mean_ms / a.mean_ms)
    } else {
        f64::NAN
    };
    BenchmarkReport { a, b, ratio }
}
