//! The posterior draws file shared by `sample` and `plan`.
//!
//! One row per kept draw: `chain, draw, t, u_*` (the last applied input),
//! the model parameters by name, `x_*` (the state at `t`) and `w<k>_<i>`
//! (the future disturbances `w̄_k`, `k = 0..=N`).

use std::path::Path;

use bayes_mpc::bayes::SampleSet;
use bayes_mpc::smpc::Scenario;

use crate::error::CliError;
use crate::output::{fmt, Table};

/// Shapes needed to lay out or parse a draws file.
#[derive(Debug, Clone)]
pub struct DrawsLayout {
    pub param_names: Vec<String>,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub horizon: usize,
}

impl DrawsLayout {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["chain".to_string(), "draw".to_string(), "t".to_string()];
        h.extend((0..self.n_u).map(|i| format!("u_{i}")));
        h.extend(self.param_names.iter().cloned());
        h.extend((0..self.n_x).map(|i| format!("x_{i}")));
        for k in 0..=self.horizon {
            h.extend((0..self.n_w).map(|i| format!("w{k}_{i}")));
        }
        h
    }
}

pub fn write(layout: &DrawsLayout, samples: &SampleSet, t: usize, u_t: &[f64], path: &Path) -> Result<(), CliError> {
    let mut table = Table::new(&layout.header())?;
    let per_chain = samples.len() / samples.n_chains.max(1);
    for (n, s) in samples.samples.iter().enumerate() {
        let mut row = vec![(n / per_chain).to_string(), (n % per_chain).to_string(), t.to_string()];
        row.extend(u_t.iter().map(|v| fmt(*v)));
        row.extend(s.theta.iter().map(|v| fmt(*v)));
        row.extend(s.current_state().iter().map(|v| fmt(*v)));
        row.extend(s.future_disturbances.iter().flatten().map(|v| fmt(*v)));
        table.row(&row)?;
    }
    table.save(path)
}

/// Draws read back from a file.
#[derive(Debug, Clone)]
pub struct Draws {
    pub t: usize,
    pub applied: Vec<f64>,
    pub scenarios: Vec<Scenario>,
}

pub fn read(layout: &DrawsLayout, path: &Path) -> Result<Draws, CliError> {
    let bad = |m: String| CliError::Samples(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let expected = layout.header();
    let found: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if found != expected {
        return Err(bad(format!("expected columns {expected:?}, found {found:?}")));
    }
    let n_theta = layout.param_names.len();
    let mut t = 0;
    let mut applied = Vec::new();
    let mut scenarios = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let number = |i: usize| -> Result<f64, CliError> {
            let v: f64 = record[i].trim().parse().map_err(|_| bad(format!("row {}: {:?} is not a number", line + 1, &record[i])))?;
            if v.is_finite() { Ok(v) } else { Err(bad(format!("row {}: non-finite value", line + 1))) }
        };
        let row_t: usize = record[2].trim().parse().map_err(|_| bad(format!("row {}: bad t", line + 1)))?;
        let mut col = 3;
        let mut take = |n: usize| -> Result<Vec<f64>, CliError> {
            let v = (col..col + n).map(&number).collect::<Result<Vec<_>, _>>()?;
            col += n;
            Ok(v)
        };
        let u = take(layout.n_u)?;
        let theta = take(n_theta)?;
        let state = take(layout.n_x)?;
        let disturbances = (0..=layout.horizon).map(|_| take(layout.n_w)).collect::<Result<Vec<_>, _>>()?;
        if scenarios.is_empty() {
            t = row_t;
            applied = u;
        } else if row_t != t || u != applied {
            return Err(bad(format!("row {}: t and u must agree across rows", line + 1)));
        }
        scenarios.push(Scenario { state, theta, disturbances });
    }
    if scenarios.is_empty() {
        return Err(bad("no draws".into()));
    }
    Ok(Draws { t, applied, scenarios })
}
