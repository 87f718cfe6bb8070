use crate::config::{CheckKind, EstimateProcess, RunConfig, SimProcess, SolverKind, TaskKind};
use anyhow::{Context, Result};
use resolvent_core::flow::SimConfig;
use resolvent_core::io::{
    write_fw_solution_csv, write_json, write_momentum_solution_csv, write_phase_solution_csv, write_probes_csv,
    write_results_csv, write_sweep_csv, write_tail_csv, write_trajectory_csv, ResultRow, SolverResidual,
};
use resolvent_core::process::{fw_start, simulate_full, simulate_fw, simulate_momentum_only};
use resolvent_core::resolvent_grid::{
    solve_fw_resolvent, solve_momentum_resolvent, solve_phase_space_resolvent, FwGrid, MomentumGrid,
};
use resolvent_core::resolvent_mc::{estimate, EstimatorKind, ProcessKind, ResolventQuery};
use resolvent_core::sampling::RandomStream;
use resolvent_core::verify::{self, BoundReport, BoundRow, McBudget, SkeletonTailReport};
use resolvent_core::PhaseState;
use serde::Serialize;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// What a task produced and whether every bound report passed.
pub struct TaskOutput {
    pub files: Vec<String>,
    pub all_pass: bool,
}

struct Sink {
    root: PathBuf,
    files: Vec<String>,
}

impl Sink {
    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.files.push(rel.to_string());
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }
}

pub fn run(cfg: &RunConfig, outdir: &Path) -> Result<TaskOutput> {
    let mut sink = Sink { root: outdir.to_path_buf(), files: Vec::new() };
    let all_pass = match cfg.task {
        TaskKind::Simulate => simulate(cfg, &mut sink).map(|_| true)?,
        TaskKind::Estimate => estimate_task(cfg, &mut sink).map(|_| true)?,
        TaskKind::Solve => solve(cfg, &mut sink).map(|_| true)?,
        TaskKind::Verify => {
            let lambdas = cfg.verify.lambdas.clone().unwrap_or_else(|| vec![cfg.model.lambda]);
            verify_task(cfg, &lambdas, &mut sink, false)?
        }
        TaskKind::Sweep => {
            let lambdas = cfg.sweep.as_ref().map(|s| s.lambdas.clone()).unwrap_or_default();
            verify_task(cfg, &lambdas, &mut sink, true)?
        }
    };
    Ok(TaskOutput { files: sink.files, all_pass })
}

fn simulate(cfg: &RunConfig, sink: &mut Sink) -> Result<()> {
    let params = cfg.model.params()?;
    let sc = &cfg.simulate;
    let sim = SimConfig::default();
    let s0 = PhaseState::new(sc.start.x, sc.start.p);
    for i in 0..sc.paths {
        let mut stream = RandomStream::new(cfg.seed, i as u64);
        let out = sink.create(&format!("data/trajectory_{i}.csv"))?;
        match sc.process {
            SimProcess::Full => {
                let t = simulate_full(s0, sc.horizon, &params, &sim, &mut stream)?;
                write_trajectory_csv(out, &t, &params.potential)?;
            }
            SimProcess::MomentumOnly => {
                let t = simulate_momentum_only(s0.p, sc.horizon, params.lambda, &mut stream)?;
                write_trajectory_csv(out, &t, &params.potential)?;
            }
            SimProcess::Homogenized => {
                let g = fw_start(&s0, &params)?;
                let t = simulate_fw(g, sc.horizon, &params, &sim, &mut stream)?;
                write_trajectory_csv(out, &t, &params.potential)?;
            }
        }
    }
    Ok(())
}

fn estimate_task(cfg: &RunConfig, sink: &mut Sink) -> Result<()> {
    let params = cfg.model.params()?;
    let ec = &cfg.estimate;
    let h = ec.modulator.build(&params);
    let f = ec.payoff.build();
    let kinds: Vec<EstimatorKind> = ec.estimators.iter().map(|e| e.parse()).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (i, qc) in ec.queries.iter().enumerate() {
        let id = qc.id.clone().unwrap_or_else(|| format!("q{i}"));
        for &k in &kinds {
            let mut q = ResolventQuery::new(PhaseState::new(qc.x, qc.p), h.clone(), f.clone())
                .estimator(k)
                .samples(ec.samples)
                .seed(cfg.seed)
                .process(match ec.process {
                    EstimateProcess::Full => ProcessKind::Full,
                    EstimateProcess::MomentumOnly => ProcessKind::MomentumOnly,
                });
            if let Some(hh) = ec.h_hat {
                q = q.h_hat(hh);
            }
            let e = estimate(&q, &params).with_context(|| format!("query {id}, estimator {k}"))?;
            rows.push(ResultRow { query_id: id.clone(), estimator: k.to_string(), estimate: e });
        }
    }
    write_results_csv(sink.create("data/results.csv")?, &rows)?;
    Ok(())
}

fn solve(cfg: &RunConfig, sink: &mut Sink) -> Result<()> {
    let params = cfg.model.params()?;
    let sc = &cfg.solve;
    let lambda = params.lambda;
    let h = sc.modulator.build(&params);
    let f = sc.payoff.build();
    let momentum_grid = || -> Result<MomentumGrid> {
        let auto = MomentumGrid::for_problem(lambda, &h, std::slice::from_ref(&f))?;
        Ok(match sc.p_max {
            Some(p) => MomentumGrid::new(p, &auto.breaks, auto.panel_width, auto.order)?,
            None => auto,
        })
    };
    let residual = match sc.solver {
        SolverKind::Momentum => {
            let grid = momentum_grid()?;
            let sol = solve_momentum_resolvent(lambda, &h, &f, &grid)?;
            write_momentum_solution_csv(sink.create("data/solution.csv")?, &sol)?;
            SolverResidual {
                solver: "momentum".into(),
                lambda,
                nodes: grid.len(),
                residual: sol.residual,
                tail_mass: Some(sol.tail_mass),
                iterations: None,
            }
        }
        SolverKind::Homogenized => {
            let kill = sc.kill_radius.unwrap_or_else(|| (2.0 * params.l).sqrt());
            let grid = FwGrid::for_problem(&params, kill, &f)?;
            let sol = solve_fw_resolvent(lambda, kill, &f, &params, &grid)?;
            write_fw_solution_csv(sink.create("data/solution.csv")?, &sol)?;
            SolverResidual {
                solver: "homogenized".into(),
                lambda,
                nodes: grid.len(),
                residual: sol.residual,
                tail_mass: None,
                iterations: None,
            }
        }
        SolverKind::PhaseSpace => {
            let grid = momentum_grid()?;
            let sol = solve_phase_space_resolvent(&params, &h, &f, sc.nx, &grid, sc.tol)?;
            write_phase_solution_csv(sink.create("data/solution.csv")?, &sol)?;
            SolverResidual {
                solver: "phase_space".into(),
                lambda,
                nodes: sol.values.len(),
                residual: sol.residual,
                tail_mass: None,
                iterations: Some(sol.iterations),
            }
        }
    };
    write_json(sink.create("reports/solver_residual.json")?, &residual)?;
    Ok(())
}

#[derive(Serialize)]
struct TailSummary<'a> {
    inequality_id: &'a str,
    reports: &'a [SkeletonTailReport],
    pass: bool,
}

fn verify_task(cfg: &RunConfig, lambdas: &[f64], sink: &mut Sink, table: bool) -> Result<bool> {
    let vc = &cfg.verify;
    let potential = cfg.model.params()?.potential;
    let budget = McBudget { samples: vc.samples, seed: cfg.seed };
    let mut reports: Vec<BoundReport> = Vec::new();
    let mut tail_rows: Vec<BoundRow> = Vec::new();
    let mut all_pass = true;
    for check in &vc.checks {
        match check {
            CheckKind::ResolventBound => {
                reports.extend(verify::check_resolvent_bound(lambdas, &potential, &budget, vc.ceiling)?)
            }
            CheckKind::LowEnergyIntegral => {
                reports.push(verify::check_low_energy_integral(lambdas, vc.level, &potential, &budget, vc.ceiling)?)
            }
            CheckKind::LowEnergyIntegralReduced => {
                reports.push(verify::check_low_energy_integral_reduced(lambdas, vc.level, &potential, vc.ceiling)?)
            }
            CheckKind::CollisionDrift => reports.push(verify::check_drift_full(lambdas, &potential)?),
            CheckKind::SkeletonDrift => reports.push(verify::check_drift_skeleton(lambdas, &potential)?),
            CheckKind::HomogenizationError => reports.push(verify::check_homogenization_error(
                lambdas,
                &vc.homogenization_momenta,
                &vc.homogenization_positions,
                &potential,
                &budget,
                vc.ceiling,
            )?),
            CheckKind::HighEnergyExcursion => {
                reports.push(verify::check_high_energy_excursion(lambdas, &potential, &budget, vc.ceiling)?)
            }
            CheckKind::SkeletonDropTail => {
                let mut tails = Vec::new();
                for &lambda in lambdas {
                    for &rho0 in &vc.tail_radii {
                        let r = verify::check_skeleton_tail(
                            lambda,
                            rho0,
                            &potential,
                            vc.tail_samples,
                            cfg.seed,
                            vc.tail_bin_width,
                        )
                        .with_context(|| format!("skeleton tail at lambda={lambda}, rho0={rho0}"))?;
                        tail_rows.push(BoundRow {
                            inequality_id: r.inequality_id.clone(),
                            lambda,
                            c_hat: r.c_hat,
                            ratio: None,
                            pass: r.pass,
                        });
                        write_tail_csv(sink.create(&format!("data/skeleton_drop_tail_{}.csv", tails.len()))?, &r)?;
                        tails.push(r);
                    }
                }
                let pass = tails.iter().all(|r| r.pass);
                all_pass &= pass;
                write_json(
                    sink.create("reports/skeleton_drop_tail.json")?,
                    &TailSummary { inequality_id: "skeleton_drop_tail", reports: &tails, pass },
                )?;
            }
        }
    }
    for r in &reports {
        all_pass &= r.pass;
        let name = file_stem(&r.inequality_id);
        write_json(sink.create(&format!("reports/{name}.json"))?, r)?;
        write_probes_csv(sink.create(&format!("data/{name}_probes.csv"))?, r)?;
    }
    if table {
        let rows = reports.iter().flat_map(|r| r.rows.iter()).chain(tail_rows.iter());
        write_sweep_csv(sink.create("data/sweep.csv")?, rows)?;
    }
    Ok(all_pass)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}
