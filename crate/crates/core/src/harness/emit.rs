use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::run::{TrajectoryLog, INPUT_TOL, OUTPUT_TOL};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(HarnessError::invalid(
                "format",
                format!("expected csv or json, got {other:?}"),
            )),
        }
    }
}

/// CSV column names for `n` states, `m` inputs and `p` outputs.
pub fn csv_header(n: usize, m: usize, p: usize) -> Vec<String> {
    let mut cols = vec!["k".to_string()];
    for (prefix, count) in [("x", n), ("u", m), ("y", p), ("ys", p), ("theta", p)] {
        cols.extend((1..=count).map(|i| format!("{prefix}{i}")));
    }
    for c in ["lambda_lo", "lambda_hi", "cost", "kkt", "solve_time_ms"] {
        cols.push(c.to_string());
    }
    cols
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(log: &TrajectoryLog, out: W) -> Result<(), HarnessError> {
    let plant = log.scenario.plant_model()?;
    let (n, m, p) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(csv_header(n, m, p)).map_err(io)?;
    for r in &log.records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.x.iter().chain(&r.u).chain(&r.y).chain(&r.y_s).map(f64::to_string));
        match &r.theta {
            Some(t) => row.extend(t.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), p)),
        }
        row.push(fmt_opt(r.lambda_lo));
        row.push(fmt_opt(r.lambda_hi));
        row.push(r.cost.to_string());
        row.push(r.kkt.to_string());
        row.push(r.solve_time_ms.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn write_json<W: Write>(log: &TrajectoryLog, out: W) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(out, log).map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn read_json_log(path: impl AsRef<Path>) -> Result<TrajectoryLog, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Parse {
        field: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

/// Re-checks every record against the scenario's input box and output set.
pub fn verify_records(log: &TrajectoryLog) -> Result<(), HarnessError> {
    let plant = log.scenario.plant_model()?;
    let cons = plant.constraints();
    for r in &log.records {
        let u = nalgebra::DVector::from_column_slice(&r.u);
        if !cons.input_admissible(&u, INPUT_TOL) {
            return Err(HarnessError::invalid(
                format!("records[{}].u", r.k),
                "outside the input box",
            ));
        }
        if !(cons.output_set.psi(&r.y) >= -OUTPUT_TOL) {
            return Err(HarnessError::invalid(
                format!("records[{}].y", r.k),
                "outside the admissible set",
            ));
        }
        if !(r.solve_time_ms > 0.0) {
            return Err(HarnessError::invalid(
                format!("records[{}].solve_time_ms", r.k),
                "must be positive",
            ));
        }
    }
    Ok(())
}

/// Writes `<out_dir>/<scenario name>.<ext>` after re-verifying the records.
pub fn emit(log: &TrajectoryLog, format: OutputFormat, out_dir: impl AsRef<Path>) -> Result<PathBuf, HarnessError> {
    verify_records(log)?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let stem = if log.scenario.name.is_empty() {
        "run"
    } else {
        &log.scenario.name
    };
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let file = std::fs::File::create(&path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let out = std::io::BufWriter::new(file);
    match format {
        OutputFormat::Csv => write_csv(log, out)?,
        OutputFormat::Json => write_json(log, out)?,
    }
    Ok(path)
}
