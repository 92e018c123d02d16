//! CSV file formats. Every file has a mandatory header row, `.` decimals and
//! LF line endings; floats are written in shortest round-trip form.

use crate::CliError;
use nalgebra::Vector3;
use robust_gnss::obs_model::{EpochObservations, EpochState, GnssSystem, SatelliteObservation, SignalLabel};
use std::path::Path;
use std::str::FromStr;

pub const OBSERVATIONS_HEADER: &[&str] =
    &["t", "sat_id", "sys", "px", "py", "pz", "vx", "vy", "vz", "pseudorange", "doppler", "wavelength", "cn0", "label"];
pub const TRUTH_HEADER: &[&str] = &["t", "px", "py", "pz", "vx", "vy", "vz", "clk_bias", "clk_drift"];
pub const SOLUTION_HEADER: &[&str] = &["t", "px", "py", "pz", "vx", "vy", "vz", "clk_bias", "method"];
pub const WEIGHTS_HEADER: &[&str] = &["t", "sat_id", "weight", "residual_m", "round"];
pub const RESIDUALS_HEADER: &[&str] = &["t", "sat_id", "residual_m", "residual"];
pub const TRACE_HEADER: &[&str] =
    &["round", "theta", "objective_start", "objective_solved", "objective_updated", "solver_iterations"];

/// Serializes rows to CSV bytes.
pub fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One data row with its 1-based line number in the file.
pub struct Row {
    pub line: u64,
    record: csv::StringRecord,
    source: String,
}

impl Row {
    pub fn get<T: FromStr>(&self, index: usize, name: &str) -> Result<T, CliError> {
        let raw = &self.record[index];
        raw.parse::<T>()
            .map_err(|_| CliError::input(format!("{}:{}: cannot parse {name} = {raw:?}", self.source, self.line)))
    }

    pub fn finite(&self, index: usize, name: &str) -> Result<f64, CliError> {
        let v: f64 = self.get(index, name)?;
        if !v.is_finite() {
            return Err(CliError::input(format!("{}:{}: {name} is not finite", self.source, self.line)));
        }
        Ok(v)
    }

    pub fn vec3(&self, index: usize, name: &str) -> Result<Vector3<f64>, CliError> {
        Ok(Vector3::new(self.finite(index, name)?, self.finite(index + 1, name)?, self.finite(index + 2, name)?))
    }

    pub fn error(&self, msg: impl std::fmt::Display) -> CliError {
        CliError::input(format!("{}:{}: {msg}", self.source, self.line))
    }
}

/// Reads a CSV file whose header must equal `header` exactly.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Row>, CliError> {
    let source = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {source}: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let found = reader.headers().map_err(|e| CliError::input(format!("{source}:1: {e}")))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(CliError::input(format!(
            "{source}:1: header must be {:?}, got {:?}",
            header.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::input(format!("{source}:{line}: malformed row: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        rows.push(Row { line, record, source: source.clone() });
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{source}: no data rows")));
    }
    Ok(rows)
}

fn f(v: f64) -> String {
    v.to_string()
}

pub fn observations_csv(epochs: &[EpochObservations]) -> Vec<u8> {
    let rows = epochs.iter().flat_map(|e| e.observations.iter()).map(|o| {
        vec![
            f(o.t),
            o.sat_id.to_string(),
            o.system.to_string(),
            f(o.sat_pos.x),
            f(o.sat_pos.y),
            f(o.sat_pos.z),
            f(o.sat_vel.x),
            f(o.sat_vel.y),
            f(o.sat_vel.z),
            f(o.pseudorange),
            f(o.doppler),
            f(o.wavelength),
            f(o.cn0),
            o.label.to_string(),
        ]
    });
    to_csv(OBSERVATIONS_HEADER, rows)
}

/// Observations grouped into epochs by consecutive equal `t`.
pub fn read_observations(path: &Path) -> Result<Vec<EpochObservations>, CliError> {
    let mut epochs: Vec<EpochObservations> = Vec::new();
    for row in read_csv(path, OBSERVATIONS_HEADER)? {
        let sys: String = row.get(2, "sys")?;
        let label: String = row.get(13, "label")?;
        let o = SatelliteObservation {
            t: row.finite(0, "t")?,
            sat_id: row.get(1, "sat_id")?,
            system: GnssSystem::from_str(&sys).map_err(|e| row.error(e))?,
            sat_pos: row.vec3(3, "satellite position")?,
            sat_vel: row.vec3(6, "satellite velocity")?,
            pseudorange: row.finite(9, "pseudorange")?,
            doppler: row.finite(10, "doppler")?,
            wavelength: row.finite(11, "wavelength")?,
            cn0: row.finite(12, "cn0")?,
            label: SignalLabel::from_str(&label).map_err(|e| row.error(e))?,
        };
        if !(o.wavelength > 0.0) {
            return Err(row.error("wavelength must be positive"));
        }
        match epochs.last_mut() {
            Some(e) if e.t == o.t => {
                if e.observations.iter().any(|p| p.sat_id == o.sat_id) {
                    return Err(row.error(format!("duplicate sat_id {} at t = {}", o.sat_id, o.t)));
                }
                e.observations.push(o);
            }
            Some(e) if o.t < e.t => return Err(row.error("time goes backwards")),
            _ => epochs.push(EpochObservations { t: o.t, observations: vec![o] }),
        }
    }
    Ok(epochs)
}

pub fn truth_csv(states: &[EpochState]) -> Vec<u8> {
    let rows = states.iter().map(|s| {
        vec![f(s.t), f(s.pos.x), f(s.pos.y), f(s.pos.z), f(s.vel.x), f(s.vel.y), f(s.vel.z), f(s.clk_bias), f(s.clk_drift)]
    });
    to_csv(TRUTH_HEADER, rows)
}

fn check_increasing(rows: &[Row], times: &[f64]) -> Result<(), CliError> {
    for (k, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(rows[k + 1].error("epoch times must strictly increase"));
        }
    }
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<EpochState>, CliError> {
    let rows = read_csv(path, TRUTH_HEADER)?;
    let states = rows
        .iter()
        .map(|r| {
            Ok(EpochState {
                t: r.finite(0, "t")?,
                pos: r.vec3(1, "position")?,
                vel: r.vec3(4, "velocity")?,
                clk_bias: r.finite(7, "clk_bias")?,
                clk_drift: r.finite(8, "clk_drift")?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    check_increasing(&rows, &states.iter().map(|s| s.t).collect::<Vec<_>>())?;
    Ok(states)
}

pub fn solution_csv(states: &[EpochState], method: &str) -> Vec<u8> {
    let rows = states.iter().map(|s| {
        vec![f(s.t), f(s.pos.x), f(s.pos.y), f(s.pos.z), f(s.vel.x), f(s.vel.y), f(s.vel.z), f(s.clk_bias), method.to_string()]
    });
    to_csv(SOLUTION_HEADER, rows)
}

/// Solution states and the method name of the file.
pub fn read_solution(path: &Path) -> Result<(String, Vec<EpochState>), CliError> {
    let rows = read_csv(path, SOLUTION_HEADER)?;
    let method: String = rows[0].get(8, "method")?;
    let mut states = Vec::with_capacity(rows.len());
    for r in &rows {
        let m: String = r.get(8, "method")?;
        if m != method {
            return Err(r.error(format!("method changes from {method} to {m}")));
        }
        states.push(EpochState {
            t: r.finite(0, "t")?,
            pos: r.vec3(1, "position")?,
            vel: r.vec3(4, "velocity")?,
            clk_bias: r.finite(7, "clk_bias")?,
            clk_drift: 0.0,
        });
    }
    check_increasing(&rows, &states.iter().map(|s| s.t).collect::<Vec<_>>())?;
    Ok((method, states))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRow {
    pub t: f64,
    pub sat_id: u32,
    pub weight: f64,
    pub residual_m: f64,
    pub round: usize,
}

pub fn weights_csv(rows: &[WeightRow]) -> Vec<u8> {
    to_csv(
        WEIGHTS_HEADER,
        rows.iter().map(|r| vec![f(r.t), r.sat_id.to_string(), f(r.weight), f(r.residual_m), r.round.to_string()]),
    )
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightRow>, CliError> {
    read_csv(path, WEIGHTS_HEADER)?
        .iter()
        .map(|r| {
            let w = WeightRow {
                t: r.finite(0, "t")?,
                sat_id: r.get(1, "sat_id")?,
                weight: r.finite(2, "weight")?,
                residual_m: r.finite(3, "residual_m")?,
                round: r.get(4, "round")?,
            };
            if !(0.0..=1.0).contains(&w.weight) {
                return Err(r.error(format!("weight {} outside [0, 1]", w.weight)));
            }
            Ok(w)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub t: f64,
    pub sat_id: u32,
    pub residual_m: f64,
    /// Sigma-whitened residual.
    pub residual: f64,
}

pub fn residuals_csv(rows: &[ResidualRow]) -> Vec<u8> {
    to_csv(
        RESIDUALS_HEADER,
        rows.iter().map(|r| vec![f(r.t), r.sat_id.to_string(), f(r.residual_m), f(r.residual)]),
    )
}

pub fn read_residuals(path: &Path) -> Result<Vec<ResidualRow>, CliError> {
    read_csv(path, RESIDUALS_HEADER)?
        .iter()
        .map(|r| {
            Ok(ResidualRow {
                t: r.finite(0, "t")?,
                sat_id: r.get(1, "sat_id")?,
                residual_m: r.finite(2, "residual_m")?,
                residual: r.finite(3, "residual")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub theta: f64,
    pub objective_start: f64,
    pub objective_solved: f64,
    pub objective_updated: f64,
    pub solver_iterations: usize,
}

pub fn trace_csv(rows: &[TraceRow]) -> Vec<u8> {
    to_csv(
        TRACE_HEADER,
        rows.iter().map(|r| {
            vec![
                r.round.to_string(),
                f(r.theta),
                f(r.objective_start),
                f(r.objective_solved),
                f(r.objective_updated),
                r.solver_iterations.to_string(),
            ]
        }),
    )
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    read_csv(path, TRACE_HEADER)?
        .iter()
        .map(|r| {
            Ok(TraceRow {
                round: r.get(0, "round")?,
                theta: r.finite(1, "theta")?,
                objective_start: r.finite(2, "objective_start")?,
                objective_solved: r.finite(3, "objective_solved")?,
                objective_updated: r.finite(4, "objective_updated")?,
                solver_iterations: r.get(5, "solver_iterations")?,
            })
        })
        .collect()
}

/// Flat `key=value` report.
pub fn report_text(entries: &[(String, String)]) -> Vec<u8> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out.into_bytes()
}

pub fn parse_report(text: &str) -> Result<Vec<(String, String)>, CliError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CliError::input(format!("report line {}: expected key=value", i + 1)))
        })
        .collect()
}
