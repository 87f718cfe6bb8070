//! CSV and JSON emitters for trajectories, estimates, solver output and
//! verification reports. Floats are written with 17 significant digits.

use crate::error::{Error, Result};
use crate::level_curves::CurveState;
use crate::model::{PhaseState, Potential};
use crate::process::Trajectory;
use crate::resolvent_grid::{FwSolution, MomentumSolution, PhaseSolution};
use crate::resolvent_mc::Estimate;
use crate::verify::{BoundReport, BoundRow, SkeletonTailReport};
use serde::Serialize;
use std::io::Write;

pub const TRAJECTORY_HEADER: [&str; 5] = ["time", "kind", "x", "p", "H"];
pub const RESULTS_HEADER: [&str; 6] = ["query_id", "estimator", "mean", "stderr", "n", "biased_flag"];
pub const SWEEP_HEADER: [&str; 5] = ["inequality_id", "lambda", "c_hat", "ratio", "pass"];
pub const PROBE_HEADER: [&str; 8] =
    ["inequality_id", "lambda", "probe", "payoff", "lhs", "lhs_stderr", "rhs", "accepted"];
pub const TAIL_HEADER: [&str; 10] =
    ["lambda", "rho0", "lo", "hi", "distance", "hits", "density", "envelope", "predicted", "identity_gap"];

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// `x` in scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// A state that can be written as a `(x, p, H)` trajectory row.
pub trait TrajectoryRow {
    fn row(&self, v: &Potential) -> (Option<f64>, f64, f64);
}

impl TrajectoryRow for PhaseState {
    fn row(&self, v: &Potential) -> (Option<f64>, f64, f64) {
        (Some(self.x), self.p, 0.5 * self.p * self.p + v.value(self.x))
    }
}

/// Momentum-only states carry no position.
impl TrajectoryRow for f64 {
    fn row(&self, _: &Potential) -> (Option<f64>, f64, f64) {
        (None, *self, 0.5 * self * self)
    }
}

/// Level-curve states write `p = ε ρ` and no position.
impl TrajectoryRow for CurveState {
    fn row(&self, _: &Potential) -> (Option<f64>, f64, f64) {
        (None, f64::from(self.eps) * self.rho, self.energy())
    }
}

/// One row for the start and one per event.
pub fn write_trajectory_csv<S: TrajectoryRow + Copy, W: Write>(
    out: W,
    traj: &Trajectory<S>,
    v: &Potential,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    let (x, p, h) = traj.start.row(v);
    w.write_record([fmt_f64(0.0), "start".into(), opt(x), fmt_f64(p), fmt_f64(h)])?;
    for e in &traj.events {
        let (x, p, h) = e.after.row(v);
        w.write_record([fmt_f64(e.time), e.kind.to_string(), opt(x), fmt_f64(p), fmt_f64(h)])?;
    }
    w.flush()?;
    Ok(())
}

/// One estimate with its query label.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub query_id: String,
    pub estimator: String,
    pub estimate: Estimate,
}

pub fn write_results_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.query_id.clone(),
            r.estimator.clone(),
            fmt_f64(r.estimate.mean),
            fmt_f64(r.estimate.stderr),
            r.estimate.n.to_string(),
            r.estimate.biased.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Nodes and values of a momentum solution: `payoff,p,weight,u`.
pub fn write_momentum_solution_csv<W: Write>(out: W, sol: &MomentumSolution) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["payoff", "p", "weight", "u"])?;
    for (k, vals) in sol.values.iter().enumerate() {
        for ((p, wt), u) in sol.grid.nodes.iter().zip(&sol.grid.weights).zip(vals) {
            w.write_record([k.to_string(), fmt_f64(*p), fmt_f64(*wt), fmt_f64(*u)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Nodes and values of a reduced-process solution: `rho,eps,weight,u`.
pub fn write_fw_solution_csv<W: Write>(out: W, sol: &FwSolution) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rho", "eps", "weight", "u"])?;
    for ((g, wt), u) in sol.grid.states.iter().zip(&sol.grid.weights).zip(&sol.values) {
        w.write_record([fmt_f64(g.rho), g.eps.to_string(), fmt_f64(*wt), fmt_f64(*u)])?;
    }
    w.flush()?;
    Ok(())
}

/// Grid values of a phase-space solution: `x,p,u`.
pub fn write_phase_solution_csv<W: Write>(out: W, sol: &PhaseSolution) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "p", "u"])?;
    let np = sol.p_nodes.len();
    for a in 0..sol.nx {
        let x = a as f64 / sol.nx as f64;
        for (k, p) in sol.p_nodes.iter().enumerate() {
            w.write_record([fmt_f64(x), fmt_f64(*p), fmt_f64(sol.values[a * np + k])])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Residual summary written next to solver output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverResidual {
    pub solver: String,
    pub lambda: f64,
    pub nodes: usize,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

pub fn write_json<T: Serialize, W: Write>(mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// `inequality_id,lambda,c_hat,ratio,pass` for every row of every report.
pub fn write_sweep_csv<'a, W: Write, I: IntoIterator<Item = &'a BoundRow>>(out: W, rows: I) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.inequality_id.clone(),
            fmt_f64(r.lambda),
            fmt_f64(r.c_hat),
            opt(r.ratio),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-probe left and right sides of a report.
pub fn write_probes_csv<W: Write>(out: W, report: &BoundReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROBE_HEADER)?;
    for p in &report.probes {
        w.write_record([
            p.inequality_id.clone(),
            fmt_f64(p.lambda),
            p.probe.clone(),
            p.payoff.clone(),
            fmt_f64(p.lhs),
            fmt_f64(p.lhs_stderr),
            fmt_f64(p.rhs),
            p.accepted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Landing histogram with its fitted envelope.
pub fn write_tail_csv<W: Write>(out: W, report: &SkeletonTailReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TAIL_HEADER)?;
    for b in &report.bins {
        w.write_record([
            fmt_f64(report.lambda),
            fmt_f64(report.rho0),
            fmt_f64(b.lo),
            fmt_f64(b.hi),
            fmt_f64(b.distance),
            b.hits.to_string(),
            fmt_f64(b.density),
            fmt_f64(b.envelope),
            fmt_f64(b.predicted),
            fmt_f64(b.identity_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn results_csv_has_declared_header() {
        let mut buf = Vec::new();
        let e = Estimate { mean: 0.0, stderr: 0.0, n: 10, biased: false, bias_bound: 0.0, wall_time: 0.0 };
        write_results_csv(&mut buf, &[ResultRow { query_id: "q0".into(), estimator: "killing".into(), estimate: e }])
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RESULTS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "q0,killing,0.0000000000000000e0,0.0000000000000000e0,10,false");
    }
}
