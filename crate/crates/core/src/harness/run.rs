use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::scenario::{Scenario, Setup};
use super::HarnessError;
use crate::mpct::{MpcQuery, WarmStart};

/// Outputs with `psi(y) < -OUTPUT_TOL` abort the run.
pub const OUTPUT_TOL: f64 = 1e-6;
/// Slack on the input box when checking applied inputs.
pub const INPUT_TOL: f64 = 1e-9;

/// One sampling instant: the state, the applied input, the measured output
/// and what the controller planned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub y_s: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub lambda_lo: Option<f64>,
    pub lambda_hi: Option<f64>,
    pub cost: f64,
    pub kkt: f64,
    pub solve_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// The stop rule fired.
    Converged,
    StepLimit,
    Failed,
    NotRun,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::StepLimit => "step_limit",
            RunStatus::Failed => "failed",
            RunStatus::NotRun => "not_run",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub steps: usize,
    /// `|y - y_t|` at the last recorded step.
    pub final_offset: Option<f64>,
    pub mean_solve_time_ms: f64,
    pub std_solve_time_ms: f64,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub scenario: Scenario,
    pub summary: RunSummary,
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    /// The log with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrajectoryLog {
        let mut log = self.clone();
        for r in &mut log.records {
            r.solve_time_ms = 0.0;
        }
        log.summary.mean_solve_time_ms = 0.0;
        log.summary.std_solve_time_ms = 0.0;
        log
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Builds the scenario and runs it.
pub fn run_closed_loop(scenario: &Scenario) -> Result<TrajectoryLog, HarnessError> {
    let setup = scenario.build()?;
    Ok(simulate(scenario, &setup))
}

/// Runs the closed loop `x(k+1) = f(x(k), u0(k))`. Failures end the run and
/// are reported in the summary; the failing step is not recorded.
pub fn simulate(scenario: &Scenario, setup: &Setup) -> TrajectoryLog {
    let mpc = &setup.mpc;
    let plant = mpc.plant();
    let cons = plant.constraints();
    let m = plant.input_dim();
    let stop = &scenario.run.stop;
    let mut records = Vec::new();
    let mut x = setup.x0.clone();
    let mut warm: Option<WarmStart> = None;
    let mut held = 0;
    let mut status = if scenario.run.steps == 0 {
        RunStatus::NotRun
    } else {
        RunStatus::StepLimit
    };
    let mut failure = None;

    for k in 0..scenario.run.steps {
        let fail = |reason: String| Failure { step: k, reason };
        let query = MpcQuery {
            x: x.clone(),
            y_t: setup.y_t.clone(),
            warm_start: warm.as_ref(),
        };
        let res = match mpc.solve_step(&query) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(fail(format!("controller error: {e}")));
                break;
            }
        };
        if res.flagged {
            failure = Some(fail(format!(
                "solver returned {} with constraint violation {:.3e}",
                res.nlp.status.as_str(),
                res.nlp.violation
            )));
            break;
        }
        if !cons.input_admissible(&res.u0, INPUT_TOL) {
            failure = Some(fail(format!("input {:?} leaves the input box", res.u0.as_slice())));
            break;
        }
        let y = match plant.output(&x, &res.u0) {
            Ok(y) => y,
            Err(e) => {
                failure = Some(fail(format!("output map failed: {e}")));
                break;
            }
        };
        let psi = cons.output_set.psi(y.as_slice());
        if !(psi >= -OUTPUT_TOL) {
            failure = Some(fail(format!(
                "output {:?} outside the admissible set (psi = {psi:.3e})",
                y.as_slice()
            )));
            break;
        }
        records.push(StepRecord {
            k,
            x: x.as_slice().to_vec(),
            u: res.u0.as_slice().to_vec(),
            y: y.as_slice().to_vec(),
            y_s: res.y_s.as_slice().to_vec(),
            theta: res.theta.as_ref().map(|t| t.as_slice().to_vec()),
            lambda_lo: res.lambda_lo,
            lambda_hi: res.lambda_hi,
            cost: res.cost,
            kkt: res.nlp.kkt,
            solve_time_ms: res.solve_time.as_secs_f64() * 1e3,
        });
        x = match plant.step(&x, &res.u0) {
            Ok(next) => next,
            Err(e) => {
                failure = Some(fail(format!("transition failed: {e}")));
                break;
            }
        };
        warm = Some(res.warm_start(m));
        if (&y - &setup.y_t).norm() <= stop.tolerance {
            held += 1;
        } else {
            held = 0;
        }
        if held >= stop.hold {
            status = RunStatus::Converged;
            break;
        }
    }
    if failure.is_some() {
        status = RunStatus::Failed;
    }
    let times: Vec<f64> = records.iter().map(|r| r.solve_time_ms).collect();
    let (mean, std) = mean_std(&times);
    let final_offset = records
        .last()
        .map(|r| (DVector::from_column_slice(&r.y) - &setup.y_t).norm());
    TrajectoryLog {
        scenario: scenario.clone(),
        summary: RunSummary {
            status,
            steps: records.len(),
            final_offset,
            mean_solve_time_ms: mean,
            std_solve_time_ms: std,
            failure,
        },
        records,
    }
}
