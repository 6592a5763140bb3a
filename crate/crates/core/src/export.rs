//! CSV output. Floats are written in scientific notation with 17 significant
//! digits so that every value round-trips exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detequiv::DeterministicPoint;
use crate::empirical::{AggregateRow, TrialSummary};
use crate::error::Result;

pub const CURVE_HEADER: [&str; 7] = ["lambda", "tau", "c_sigma", "l_sigma", "bound1", "bound2", "bound3"];
pub const TRIAL_HEADER: [&str; 4] = ["lambda", "seed", "c_emp", "l_emp"];
pub const AGGREGATE_HEADER: [&str; 6] = ["lambda", "c_mean", "c_std", "l_mean", "l_std", "n_seeds"];
pub const LADDER_HEADER: [&str; 4] = ["p", "mean_gap", "max_gap", "seed"];
pub const SIMPLICITY_HEADER: [&str; 8] = [
    "axis_value",
    "c_sigma",
    "l_sigma",
    "c_emp_mean",
    "l_emp_mean",
    "c_emp_std",
    "l_emp_std",
    "n_seeds",
];
pub const RF_SPURIOUS_HEADER: [&str; 10] = [
    "activation",
    "lambda",
    "lambda_tilde",
    "c_rf",
    "c_rf_se",
    "c_rf_exact",
    "c_rf_linear",
    "c_sigma",
    "n_seeds",
    "m",
];

/// Full-precision float formatting.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// One row of an equivalence ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub p: usize,
    pub mean_gap: f64,
    pub max_gap: f64,
    pub seed: u64,
}

/// One point of a simplicity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplicityRow {
    pub axis_value: f64,
    pub c_sigma: f64,
    pub l_sigma: f64,
    pub c_emp_mean: f64,
    pub l_emp_mean: f64,
    pub c_emp_std: f64,
    pub l_emp_std: f64,
    pub n_seeds: usize,
}

/// RF spurious covariance next to the linear prediction at `λ̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfSpuriousRow {
    pub activation: String,
    pub lambda: f64,
    pub lambda_tilde: f64,
    /// Mean over seeds of the Monte Carlo estimate.
    pub c_rf: f64,
    /// Standard error across seeds.
    pub c_rf_se: f64,
    /// Mean over seeds of the quadrature value.
    pub c_rf_exact: f64,
    /// Mean over seeds of the first-Hermite-component covariance.
    pub c_rf_linear: f64,
    pub c_sigma: f64,
    pub n_seeds: usize,
    pub m: usize,
}

fn write_rows<W: Write>(out: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_curve<W: Write>(out: W, points: &[DeterministicPoint]) -> Result<()> {
    write_rows(
        out,
        &CURVE_HEADER,
        points.iter().map(|p| {
            let mut r = vec![fmt_float(p.lambda), fmt_float(p.tau), fmt_float(p.c_sigma), fmt_float(p.l_sigma)];
            r.extend(p.bounds.iter().map(|&b| fmt_float(b)));
            r
        }),
    )
}

pub fn write_trials<W: Write>(out: W, trials: &[TrialSummary]) -> Result<()> {
    write_rows(
        out,
        &TRIAL_HEADER,
        trials
            .iter()
            .map(|t| vec![fmt_float(t.lambda), t.seed.to_string(), fmt_float(t.c_emp), fmt_float(t.l_emp)]),
    )
}

pub fn write_aggregate<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    write_rows(
        out,
        &AGGREGATE_HEADER,
        rows.iter().map(|a| {
            vec![
                fmt_float(a.lambda),
                fmt_float(a.c_mean),
                fmt_float(a.c_std),
                fmt_float(a.l_mean),
                fmt_float(a.l_std),
                a.n_seeds.to_string(),
            ]
        }),
    )
}

pub fn write_ladder<W: Write>(out: W, rows: &[LadderRow]) -> Result<()> {
    write_rows(
        out,
        &LADDER_HEADER,
        rows.iter()
            .map(|r| vec![r.p.to_string(), fmt_float(r.mean_gap), fmt_float(r.max_gap), r.seed.to_string()]),
    )
}

pub fn write_simplicity<W: Write>(out: W, rows: &[SimplicityRow]) -> Result<()> {
    write_rows(
        out,
        &SIMPLICITY_HEADER,
        rows.iter().map(|r| {
            vec![
                fmt_float(r.axis_value),
                fmt_float(r.c_sigma),
                fmt_float(r.l_sigma),
                fmt_float(r.c_emp_mean),
                fmt_float(r.l_emp_mean),
                fmt_float(r.c_emp_std),
                fmt_float(r.l_emp_std),
                r.n_seeds.to_string(),
            ]
        }),
    )
}

pub fn write_rf_spurious<W: Write>(out: W, rows: &[RfSpuriousRow]) -> Result<()> {
    write_rows(
        out,
        &RF_SPURIOUS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.activation.clone(),
                fmt_float(r.lambda),
                fmt_float(r.lambda_tilde),
                fmt_float(r.c_rf),
                fmt_float(r.c_rf_se),
                fmt_float(r.c_rf_exact),
                fmt_float(r.c_rf_linear),
                fmt_float(r.c_sigma),
                r.n_seeds.to_string(),
                r.m.to_string(),
            ]
        }),
    )
}
