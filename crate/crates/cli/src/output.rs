//! Artifact writers. Every file goes through a temporary file in the target
//! directory and is renamed into place, so a crash never leaves a truncated
//! CSV behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use bayes_mpc::closed_loop::{ClosedLoopRun, HorizonSnapshot, QUANTILES};
use bayes_mpc::smpc::TraceRow;

use crate::error::CliError;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// A CSV document built in memory and written atomically.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[String]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn save(self, path: &Path) -> Result<(), CliError> {
        let bytes = self.writer.into_inner().map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
        write_atomic(path, &bytes)
    }
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn numbers(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| fmt(*v)).collect()
}

pub fn trajectory(run: &ClosedLoopRun, path: &Path) -> Result<(), CliError> {
    let Some(first) = run.records.first() else {
        return Table::new(&["t".into()])?.save(path);
    };
    let (n_x, n_y, n_u) = (first.true_state.len(), first.measurement.len(), first.input.len());
    let mut header = vec!["t".to_string()];
    header.extend(indexed("x_true_", n_x));
    header.extend(indexed("y_", n_y));
    header.extend(indexed("x_mean_", n_x));
    header.extend(indexed("x_std_", n_x));
    header.extend(indexed("u_", n_u));
    header.extend(indexed("u_next_", n_u));
    for name in &run.param_names {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    header.extend(
        ["solver_status", "solver_iterations", "slack", "max_rhat", "min_acceptance", "max_acceptance", "divergences"]
            .map(String::from),
    );
    let mut table = Table::new(&header)?;
    for r in &run.records {
        let mut row = vec![r.t.to_string()];
        row.extend(numbers(&r.true_state));
        row.extend(numbers(&r.measurement));
        row.extend(numbers(&r.state_mean));
        row.extend(numbers(&r.state_std));
        row.extend(numbers(&r.input));
        row.extend(numbers(&r.next_input));
        for (m, s) in r.param_mean.iter().zip(&r.param_std) {
            row.push(fmt(*m));
            row.push(fmt(*s));
        }
        row.push(status_name(r.solver_status));
        row.push(r.solver_iterations.to_string());
        row.push(fmt(r.slack));
        row.push(fmt(r.max_rhat));
        row.push(fmt(r.min_acceptance));
        row.push(fmt(r.max_acceptance));
        row.push(r.divergences.to_string());
        table.row(&row)?;
    }
    table.save(path)
}

pub fn status_name(status: bayes_mpc::SolveStatus) -> String {
    serde_json::to_value(status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

pub fn horizon_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("horizon_t{t}.csv"))
}

pub fn horizon(snapshot: &HorizonSnapshot, path: &Path) -> Result<(), CliError> {
    let n_u = snapshot.rows.first().map_or(0, |r| r.input.len());
    let n_x = snapshot.rows.first().map_or(0, |r| r.quantiles.len());
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend(indexed("u_", n_u));
    for i in 0..n_x {
        header.extend(QUANTILES.iter().map(|q| format!("x{i}_q{:02}", (q * 100.0).round() as u32)));
    }
    let mut table = Table::new(&header)?;
    for row in &snapshot.rows {
        let mut fields = vec![row.step.to_string(), (snapshot.t + row.step).to_string()];
        fields.extend(numbers(&row.input));
        for q in &row.quantiles {
            fields.extend(numbers(q));
        }
        table.row(&fields)?;
    }
    table.save(path)
}

pub fn solver_trace(trace: &[TraceRow], path: &Path) -> Result<(), CliError> {
    let header = ["iteration", "mu", "gamma", "cost", "decrement", "alpha", "slack"].map(String::from);
    let mut table = Table::new(&header)?;
    for r in trace {
        table.row(&[
            r.iteration.to_string(),
            fmt(r.mu),
            fmt(r.gamma),
            fmt(r.cost),
            fmt(r.decrement),
            fmt(r.alpha),
            fmt(r.slack),
        ])?;
    }
    table.save(path)
}

pub fn json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
