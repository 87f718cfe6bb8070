//! Deterministic resolvent solvers: Nyström discretization of the momentum
//! resolvent equation, its Neumann-series expansion, the integral equation
//! on level-curve components, a first-order phase-space solver, and the
//! closed form of the Brownian local-time example.
//!
//! All jump operators are discretized in generator form,
//! `Σ_j w_j J(p_i, p_j)(u_i - u_j)`, so the discrete escape rate is the row
//! sum of the quadrature kernel and constants are annihilated exactly.
//! Jumps past the truncation radius are dropped; the analytic mass they
//! carry is reported as `tail_mass`.

use crate::error::{Error, Result};
use crate::level_curves::{hat_map, kernel_mass_between, reduced_floor, CurveQuadrature, CurveState};
use crate::model::{escape_rate, jump_kernel, ModelParams, Modulator, Payoff, PhaseState, Potential};
use crate::quad::composite_rule;
use nalgebra::{DMatrix, DVector};

/// Composite Gauss–Legendre nodes on `[-P, P]`, symmetric about zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub p_max: f64,
    pub breaks: Vec<f64>,
    pub panel_width: f64,
    pub order: usize,
}

impl MomentumGrid {
    /// Panels no wider than `panel_width`, split at `0`, `±P` and `±b` for
    /// every extra breakpoint `b`.
    pub fn new(p_max: f64, extra_breaks: &[f64], panel_width: f64, order: usize) -> Result<Self> {
        if !(p_max > 0.0 && panel_width > 0.0 && order >= 2) {
            return Err(Error::InvalidParameter(format!(
                "bad momentum grid: p_max {p_max}, width {panel_width}, order {order}"
            )));
        }
        let mut breaks = vec![-p_max, 0.0, p_max];
        for &b in extra_breaks {
            if b.is_finite() && b.abs() < p_max && b != 0.0 {
                breaks.push(b.abs());
                breaks.push(-b.abs());
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let (nodes, weights) = composite_rule(&breaks, panel_width, order);
        Ok(Self { nodes, weights, p_max, breaks, panel_width, order })
    }

    /// `P = max(20, 7/λ)`: jumps from `±P` leave the grid with probability
    /// of order `Φ(-7)`.
    pub fn default_p_max(lambda: f64) -> f64 {
        20f64.max(7.0 / lambda)
    }

    /// Default grid for a problem, with breakpoints at the discontinuities
    /// of the modulator and payoffs.
    pub fn for_problem(lambda: f64, h: &Modulator, payoffs: &[Payoff]) -> Result<Self> {
        Self::new(Self::default_p_max(lambda), &momentum_breaks(h, payoffs), 0.5, 8)
    }

    /// Same breakpoints, panels of half the width.
    pub fn refined(&self) -> Result<Self> {
        Self::new(self.p_max, &self.breaks, 0.5 * self.panel_width, self.order)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Momenta where `h` or one of the payoffs jumps, as functions of `p` alone.
pub fn momentum_breaks(h: &Modulator, payoffs: &[Payoff]) -> Vec<f64> {
    let mut out = Vec::new();
    match h {
        Modulator::EnergyIndicator { level } if *level > 0.0 => out.push((2.0 * level).sqrt()),
        Modulator::MomentumIndicator { bound } => out.push(*bound),
        _ => {}
    }
    for f in payoffs {
        match f {
            Payoff::IndicatorBand { lo, hi } => out.extend([*lo, *hi]),
            Payoff::EnergyBand { lo, hi } => {
                out.extend([*lo, *hi].into_iter().filter(|e| *e > 0.0).map(|e| (2.0 * e).sqrt()))
            }
            _ => {}
        }
    }
    out.retain(|b| b.is_finite());
    out
}

/// Quadrature kernel `K_ij = w_j J_λ(p_i, p_j)`.
fn kernel_matrix(lambda: f64, grid: &MomentumGrid) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |i, j| grid.weights[j] * jump_kernel(lambda, grid.nodes[i], grid.nodes[j]))
}

fn eval_flat_payoff(f: &Payoff, p: f64) -> f64 {
    f.eval_momentum(p)
}

fn eval_flat_modulator(h: &Modulator, p: f64) -> f64 {
    h.eval(&PhaseState { x: 0.0, p }, &Potential::zero())
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solution of the momentum resolvent equation on a grid, with Nyström
/// interpolation off the nodes.
#[derive(Debug, Clone)]
pub struct MomentumSolution {
    pub lambda: f64,
    pub grid: MomentumGrid,
    pub modulator: Modulator,
    pub payoffs: Vec<Payoff>,
    /// `values[k][i]` approximates `U_h(p_i, f_k)`.
    pub values: Vec<Vec<f64>>,
    /// `‖A u - f‖_∞ / (1 + ‖u‖_∞)`, worst over payoffs.
    pub residual: f64,
    /// Largest relative kernel mass leaving `[-P, P]` from a node.
    pub tail_mass: f64,
}

impl MomentumSolution {
    /// `u(p) = (f(p) + Σ w_j J(p,p_j) u_j) / (h(p) + Σ w_j J(p,p_j))`.
    pub fn eval(&self, k: usize, p: f64) -> f64 {
        let (mut num, mut den) = (eval_flat_payoff(&self.payoffs[k], p), eval_flat_modulator(&self.modulator, p));
        for ((&q, &w), &u) in self.grid.nodes.iter().zip(&self.grid.weights).zip(&self.values[k]) {
            let j = w * jump_kernel(self.lambda, p, q);
            num += j * u;
            den += j;
        }
        num / den
    }
}

/// Solves `h u - Σ_j w_j J(p, p_j)(u_j - u) = f` for every payoff.
pub fn solve_momentum_resolvent_many(
    lambda: f64,
    h: &Modulator,
    payoffs: &[Payoff],
    grid: &MomentumGrid,
) -> Result<MomentumSolution> {
    let n = grid.len();
    let hv: Vec<f64> = grid.nodes.iter().map(|&p| eval_flat_modulator(h, p)).collect();
    if hv.iter().all(|&v| v <= 0.0) {
        return Err(Error::Singular("modulator vanishes on every grid node".into()));
    }
    let k = kernel_matrix(lambda, grid);
    let mut a = -k.clone();
    for i in 0..n {
        a[(i, i)] += hv[i] + k.row(i).sum();
    }
    let lu = a.clone().lu();
    let mut values = Vec::new();
    let mut residual = 0.0f64;
    for f in payoffs {
        let rhs = DVector::from_iterator(n, grid.nodes.iter().map(|&p| eval_flat_payoff(f, p)));
        let mut u = lu.solve(&rhs).ok_or_else(|| Error::Singular("momentum system".into()))?;
        let r = &rhs - &a * &u;
        if let Some(du) = lu.solve(&r) {
            u += du;
        }
        let r = &a * &u - &rhs;
        residual = residual.max(sup_norm(&r) / (1.0 + sup_norm(&u)));
        values.push(u.iter().copied().collect());
    }
    let tail_mass = grid
        .nodes
        .iter()
        .map(|&p| {
            let e = escape_rate(lambda, p);
            ((e - kernel_mass_between(lambda, p, -grid.p_max, grid.p_max)) / e).max(0.0)
        })
        .fold(0.0, f64::max);
    Ok(MomentumSolution {
        lambda,
        grid: grid.clone(),
        modulator: h.clone(),
        payoffs: payoffs.to_vec(),
        values,
        residual,
        tail_mass,
    })
}

pub fn solve_momentum_resolvent(
    lambda: f64,
    h: &Modulator,
    f: &Payoff,
    grid: &MomentumGrid,
) -> Result<MomentumSolution> {
    solve_momentum_resolvent_many(lambda, h, std::slice::from_ref(f), grid)
}

/// Output of [`neumann_series_resolvent`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeumannResult {
    pub values: Vec<f64>,
    /// Number of terms beyond the zeroth.
    pub terms: usize,
    /// Geometric bound on the omitted tail, in sup norm.
    pub tail_bound: f64,
    /// Observed contraction ratio of the last terms.
    pub ratio: f64,
    /// Whether every partial sum dominated the previous one.
    pub monotone: bool,
}

/// `U_h f = Σ_n U_ĥ (M_{ĥ-h} U_ĥ)^n f` on the grid, summed until the
/// geometric tail bound drops below `tol (1 + ‖u‖)`.
pub fn neumann_series_resolvent(
    lambda: f64,
    h: &Modulator,
    h_hat: f64,
    f: &Payoff,
    grid: &MomentumGrid,
    max_terms: usize,
    tol: f64,
) -> Result<NeumannResult> {
    let n = grid.len();
    let hv: Vec<f64> = grid.nodes.iter().map(|&p| eval_flat_modulator(h, p)).collect();
    if hv.iter().any(|&v| v > h_hat * (1.0 + 1e-15)) {
        return Err(Error::InvalidParameter(format!("majorant {h_hat} below sup h")));
    }
    let k = kernel_matrix(lambda, grid);
    let mut a = -k.clone();
    for i in 0..n {
        a[(i, i)] += h_hat + k.row(i).sum();
    }
    let lu = a.lu();
    let rhs = DVector::from_iterator(n, grid.nodes.iter().map(|&p| eval_flat_payoff(f, p)));
    let mut term = lu.solve(&rhs).ok_or_else(|| Error::Singular("standard resolvent".into()))?;
    let mut sum = term.clone();
    let mut monotone = term.iter().all(|&v| v >= -1e-14);
    let (mut ratio, mut stalled, mut terms) = (0.0f64, 0usize, 0usize);
    let mut tail_bound = f64::INFINITY;
    let gap = DVector::from_iterator(n, hv.iter().map(|&v| h_hat - v));
    while terms < max_terms {
        let prev = sup_norm(&term);
        if prev == 0.0 {
            tail_bound = 0.0;
            break;
        }
        let next = lu.solve(&term.component_mul(&gap)).ok_or_else(|| Error::Singular("standard resolvent".into()))?;
        terms += 1;
        let norm = sup_norm(&next);
        ratio = norm / prev;
        monotone &= next.iter().all(|&v| v >= -1e-14);
        sum += &next;
        term = next;
        if ratio >= 1.0 - 1e-15 {
            stalled += 1;
            if stalled >= 10 {
                return Err(Error::Divergence(format!("term ratio {ratio} after {terms} terms")));
            }
            continue;
        }
        stalled = 0;
        tail_bound = norm * ratio / (1.0 - ratio);
        if tail_bound <= tol * (1.0 + sup_norm(&sum)) {
            break;
        }
    }
    if tail_bound > tol * (1.0 + sup_norm(&sum)) {
        return Err(Error::NoConvergence(format!("Neumann series tail bound {tail_bound:e} after {terms} terms")));
    }
    Ok(NeumannResult { values: sum.iter().copied().collect(), terms, tail_bound, ratio, monotone })
}

/// Nodes on the reduced domain: each branch carries composite
/// Gauss–Legendre nodes in `ρ ∈ [floor, R]`. Unknowns are ordered by
/// signed radius `ερ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FwGrid {
    pub states: Vec<CurveState>,
    pub weights: Vec<f64>,
    pub r_max: f64,
    pub floor: f64,
}

impl FwGrid {
    pub fn new(
        potential: &Potential,
        r_max: f64,
        extra_breaks: &[f64],
        panel_width: f64,
        order: usize,
    ) -> Result<Self> {
        let floor = reduced_floor(potential);
        if !(r_max > floor && panel_width > 0.0 && order >= 2) {
            return Err(Error::InvalidParameter(format!("bad reduced grid: R {r_max}, floor {floor}")));
        }
        let mut breaks = vec![floor, r_max];
        breaks.extend(extra_breaks.iter().map(|b| b.abs()).filter(|b| *b > floor && *b < r_max));
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let (rhos, ws) = composite_rule(&breaks, panel_width, order);
        let mut states = Vec::with_capacity(2 * rhos.len());
        let mut weights = Vec::with_capacity(2 * rhos.len());
        for (&r, &w) in rhos.iter().zip(&ws).rev() {
            states.push(CurveState::new(r, -1));
            weights.push(w);
        }
        for (&r, &w) in rhos.iter().zip(&ws) {
            states.push(CurveState::new(r, 1));
            weights.push(w);
        }
        Ok(Self { states, weights, r_max, floor })
    }

    /// Default grid for a payoff and kill radius: `R = max(20, 7/λ)`, panels
    /// of width 0.5, breaks where the orbit's momentum range meets a
    /// payoff discontinuity.
    pub fn for_problem(params: &ModelParams, kill_radius: f64, f: &Payoff) -> Result<Self> {
        let sup = params.potential.sup();
        let mut breaks = vec![kill_radius];
        for e in momentum_breaks(&Modulator::Constant(1.0), std::slice::from_ref(f)) {
            breaks.push(e.abs());
            breaks.push((e * e + 2.0 * sup).sqrt());
        }
        Self::new(&params.potential, MomentumGrid::default_p_max(params.lambda), &breaks, 0.5, 8)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Number of torus nodes used for orbit averages in the reduced solver.
pub const FW_TORUS_NODES: usize = 128;

struct OrbitRow {
    kappa: Vec<f64>,
    momenta: Vec<f64>,
}

fn orbit_row(gamma: &CurveState, params: &ModelParams) -> Result<OrbitRow> {
    let q = CurveQuadrature::new(gamma, params, FW_TORUS_NODES)?;
    Ok(OrbitRow { kappa: q.kappa, momenta: q.momenta })
}

/// Landing momenta `p'_j(x_k)` and Jacobians `ρ'_j/|p'_j(x_k)|` per column.
fn landing_table(grid: &FwGrid, params: &ModelParams) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let xs = CurveQuadrature::new(&grid.states[grid.len() - 1], params, FW_TORUS_NODES)?.xs;
    let v = &params.potential;
    let mut momenta = Vec::with_capacity(grid.len());
    let mut jac = Vec::with_capacity(grid.len());
    for g in &grid.states {
        let r2 = g.rho * g.rho;
        let sign = if g.eps < 0 { -1.0 } else { 1.0 };
        let ps: Vec<f64> = xs.iter().map(|&x| sign * (r2 - 2.0 * v.value(x)).sqrt()).collect();
        jac.push(ps.iter().map(|p| g.rho / p.abs()).collect());
        momenta.push(ps);
    }
    Ok((xs, momenta, jac))
}

fn kernel_row(lambda: f64, row: &OrbitRow, landing: &[Vec<f64>], jac: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    landing
        .iter()
        .zip(jac)
        .zip(weights)
        .map(|((ps, js), &w)| {
            w * row
                .kappa
                .iter()
                .zip(&row.momenta)
                .zip(ps.iter().zip(js))
                .map(|((&k, &p), (&q, &j))| k * jump_kernel(lambda, p, q) * j)
                .sum::<f64>()
        })
        .collect()
}

fn exit_rate_row(lambda: f64, row: &OrbitRow, xs: &[f64], params: &ModelParams, floor: f64) -> f64 {
    let v = &params.potential;
    if v.is_zero() {
        return 0.0;
    }
    row.kappa
        .iter()
        .zip(&row.momenta)
        .zip(xs)
        .map(|((&k, &p), &x)| {
            let cap = (floor * floor - 2.0 * v.value(x)).max(0.0).sqrt();
            k * kernel_mass_between(lambda, p, -cap, cap)
        })
        .sum()
}

/// Solution of the reduced integral equation.
#[derive(Debug, Clone)]
pub struct FwSolution {
    pub lambda: f64,
    pub kill_radius: f64,
    pub grid: FwGrid,
    pub values: Vec<f64>,
    pub residual: f64,
    params: ModelParams,
    payoff: Payoff,
}

impl FwSolution {
    /// Nyström interpolation at a revolving component above the floor.
    pub fn eval(&self, gamma: &CurveState) -> Result<f64> {
        let row = orbit_row(gamma, &self.params)?;
        let (xs, landing, jac) = landing_table(&self.grid, &self.params)?;
        let k = kernel_row(self.lambda, &row, &landing, &jac, &self.grid.weights);
        let exit = exit_rate_row(self.lambda, &row, &xs, &self.params, self.grid.floor);
        let h = if gamma.rho <= self.kill_radius { 1.0 } else { 0.0 };
        let f = hat_map(&self.payoff, gamma, &self.params)?;
        let num = f + k.iter().zip(&self.values).map(|(a, b)| a * b).sum::<f64>();
        Ok(num / (h + exit + k.iter().sum::<f64>()))
    }

    /// Value at the node closest to `gamma`.
    pub fn node_value(&self, gamma: &CurveState) -> f64 {
        let idx = self
            .grid
            .states
            .iter()
            .enumerate()
            .filter(|(_, g)| g.eps == gamma.eps)
            .min_by(|a, b| (a.1.rho - gamma.rho).abs().total_cmp(&(b.1.rho - gamma.rho).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.values[idx]
    }
}

/// Solves `f̂ = ĥ Ū + ∫ Ĵ_λ(γ, γ')(Ū(γ) - Ū(γ')) dγ'` with
/// `ĥ = χ(ρ ≤ kill_radius)`. Jumps landing below the floor are killed,
/// which adds their rate to the diagonal.
pub fn solve_fw_resolvent(
    lambda: f64,
    kill_radius: f64,
    f: &Payoff,
    params: &ModelParams,
    grid: &FwGrid,
) -> Result<FwSolution> {
    let n = grid.len();
    let (xs, landing, jac) = landing_table(grid, params)?;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut any_kill = false;
    for (i, g) in grid.states.iter().enumerate() {
        let row = orbit_row(g, params)?;
        let k = kernel_row(lambda, &row, &landing, &jac, &grid.weights);
        let exit = exit_rate_row(lambda, &row, &xs, params, grid.floor);
        let h = if g.rho <= kill_radius { 1.0 } else { 0.0 };
        any_kill |= h > 0.0 || exit > 0.0;
        for j in 0..n {
            a[(i, j)] = -k[j];
        }
        a[(i, i)] += h + exit + k.iter().sum::<f64>();
        rhs[i] = hat_map(f, g, params)?;
    }
    if !any_kill {
        return Err(Error::Singular("no killing on the reduced grid".into()));
    }
    let lu = a.clone().lu();
    let mut u = lu.solve(&rhs).ok_or_else(|| Error::Singular("reduced system".into()))?;
    if let Some(du) = lu.solve(&(&rhs - &a * &u)) {
        u += du;
    }
    let residual = sup_norm(&(&a * &u - &rhs)) / (1.0 + sup_norm(&u));
    Ok(FwSolution {
        lambda,
        kill_radius,
        grid: grid.clone(),
        values: u.iter().copied().collect(),
        residual,
        params: params.clone(),
        payoff: f.clone(),
    })
}

/// Phase-space solution on a uniform `x` grid times a momentum grid.
#[derive(Debug, Clone)]
pub struct PhaseSolution {
    pub nx: usize,
    pub p_nodes: Vec<f64>,
    /// `values[a * np + k]` at `(a/nx, p_k)`.
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl PhaseSolution {
    /// Linear interpolation in both coordinates.
    pub fn eval(&self, s: &PhaseState) -> f64 {
        let np = self.p_nodes.len();
        let xs = s.x * self.nx as f64;
        let a0 = (xs.floor() as usize) % self.nx;
        let a1 = (a0 + 1) % self.nx;
        let tx = xs - xs.floor();
        let k = self.p_nodes.partition_point(|&q| q <= s.p).clamp(1, np - 1);
        let (p0, p1) = (self.p_nodes[k - 1], self.p_nodes[k]);
        let tp = ((s.p - p0) / (p1 - p0)).clamp(0.0, 1.0);
        let at = |a: usize| self.values[a * np + k - 1] * (1.0 - tp) + self.values[a * np + k] * tp;
        at(a0) * (1.0 - tx) + at(a1) * tx
    }
}

struct PhaseOperator<'a> {
    nx: usize,
    np: usize,
    kernel: &'a DMatrix<f64>,
    diag: Vec<f64>,
    px: Vec<f64>,
    force: Vec<f64>,
    p: &'a [f64],
}

impl PhaseOperator<'_> {
    /// Off-block part: transport in `x`.
    fn apply_x(&self, u: &[f64], out: &mut [f64]) {
        let (nx, np) = (self.nx, self.np);
        for a in 0..nx {
            let (up, dn) = ((a + 1) % nx, (a + nx - 1) % nx);
            for k in 0..np {
                let c = self.px[k];
                out[a * np + k] = if c > 0.0 { -c * u[up * np + k] } else { c * u[dn * np + k] };
            }
        }
    }

    /// In-block operator at position `a`: diagonal, force transport, collisions.
    fn block(&self, a: usize) -> DMatrix<f64> {
        let np = self.np;
        let mut m = -self.kernel.clone();
        let c = self.force[a];
        for k in 0..np {
            m[(k, k)] += self.diag[a * np + k];
            if c > 0.0 && k + 1 < np {
                let r = c / (self.p[k + 1] - self.p[k]);
                m[(k, k)] += r;
                m[(k, k + 1)] -= r;
            } else if c < 0.0 && k > 0 {
                let r = -c / (self.p[k] - self.p[k - 1]);
                m[(k, k)] += r;
                m[(k, k - 1)] -= r;
            }
        }
        m
    }
}

/// First-order upwind solve of `h u - L u = f` for the full generator
/// `L = p ∂_x - V'(x) ∂_p + collisions` on `nx` uniform torus points times the
/// nodes of `pgrid`. Restarted GMRES with an exact per-`x` block
/// preconditioner. Intended for coarse cross-checks only.
pub fn solve_phase_space_resolvent(
    params: &ModelParams,
    h: &Modulator,
    f: &Payoff,
    nx: usize,
    pgrid: &MomentumGrid,
    tol: f64,
) -> Result<PhaseSolution> {
    let v = &params.potential;
    let np = pgrid.len();
    let n = nx * np;
    let dx = 1.0 / nx as f64;
    let k = kernel_matrix(params.lambda, pgrid);
    let rowsum: Vec<f64> = (0..np).map(|i| k.row(i).sum()).collect();
    let px: Vec<f64> = pgrid.nodes.iter().map(|&p| p / dx).collect();
    let force: Vec<f64> = (0..nx).map(|a| -v.slope(a as f64 * dx)).collect();
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut any = false;
    for a in 0..nx {
        for (i, &p) in pgrid.nodes.iter().enumerate() {
            let s = PhaseState { x: a as f64 * dx, p };
            let hv = h.eval(&s, v);
            any |= hv > 0.0;
            diag[a * np + i] = hv + rowsum[i] + px[i].abs();
            rhs[a * np + i] = f.eval(&s, v);
        }
    }
    if !any {
        return Err(Error::Singular("modulator vanishes on the phase grid".into()));
    }
    let op = PhaseOperator { nx, np, kernel: &k, diag, px, force, p: &pgrid.nodes };
    let blocks: Vec<_> = (0..nx).map(|a| op.block(a).lu()).collect();
    let full_blocks: Vec<DMatrix<f64>> = (0..nx).map(|a| op.block(a)).collect();
    let apply = |u: &[f64], out: &mut [f64]| {
        op.apply_x(u, out);
        for a in 0..nx {
            let ua = DVector::from_column_slice(&u[a * np..(a + 1) * np]);
            let ya = &full_blocks[a] * ua;
            for i in 0..np {
                out[a * np + i] += ya[i];
            }
        }
    };
    let precond = |r: &[f64], out: &mut [f64]| -> Result<()> {
        for a in 0..nx {
            let ra = DVector::from_column_slice(&r[a * np..(a + 1) * np]);
            let za = blocks[a].solve(&ra).ok_or_else(|| Error::Singular("phase-space block".into()))?;
            out[a * np..(a + 1) * np].copy_from_slice(za.as_slice());
        }
        Ok(())
    };
    let (values, iterations, residual) = gmres(n, &apply, &precond, &rhs, tol, 60, 4000)?;
    Ok(PhaseSolution { nx, p_nodes: pgrid.nodes.clone(), values, iterations, residual })
}

/// Right-preconditioned restarted GMRES. Returns the solution, the number of
/// inner iterations and the final relative residual.
fn gmres(
    n: usize,
    apply: &dyn Fn(&[f64], &mut [f64]),
    precond: &dyn Fn(&[f64], &mut [f64]) -> Result<()>,
    b: &[f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let mut iters = 0;
    let mut tmp = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        apply(&x, &mut tmp);
        let r: Vec<f64> = b.iter().zip(&tmp).map(|(bi, ti)| bi - ti).collect();
        let beta = norm(&r);
        if beta <= tol * bnorm {
            return Ok((x, iters, beta / bnorm));
        }
        if iters >= max_iter {
            return Err(Error::NoConvergence(format!("GMRES residual {:e} after {iters} iterations", beta / bnorm)));
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut m = 0;
        while m < restart && iters < max_iter {
            precond(&basis[m], &mut z)?;
            apply(&z, &mut tmp);
            let mut w = tmp.clone();
            for (i, vi) in basis.iter().enumerate() {
                let hij: f64 = w.iter().zip(vi).map(|(a, b)| a * b).sum();
                hess[i][m] = hij;
                w.iter_mut().zip(vi).for_each(|(a, b)| *a -= hij * b);
            }
            let wn = norm(&w);
            hess[m + 1][m] = wn;
            for i in 0..m {
                let t = cs[i] * hess[i][m] + sn[i] * hess[i + 1][m];
                hess[i + 1][m] = -sn[i] * hess[i][m] + cs[i] * hess[i + 1][m];
                hess[i][m] = t;
            }
            let d = hess[m][m].hypot(hess[m + 1][m]);
            cs[m] = hess[m][m] / d;
            sn[m] = hess[m + 1][m] / d;
            hess[m][m] = d;
            hess[m + 1][m] = 0.0;
            g[m + 1] = -sn[m] * g[m];
            g[m] *= cs[m];
            m += 1;
            iters += 1;
            if g[m].abs() <= tol * bnorm || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let s: f64 = (i + 1..m).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        let mut update = vec![0.0; n];
        for (yi, vi) in y.iter().zip(&basis) {
            update.iter_mut().zip(vi).for_each(|(u, v)| *u += yi * v);
        }
        precond(&update, &mut z)?;
        x.iter_mut().zip(&z).for_each(|(xi, zi)| *xi += zi);
    }
}

/// A nonnegative payoff made of unit-height momentum bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPayoff {
    pub bands: Vec<(f64, f64)>,
}

impl BandPayoff {
    pub fn new(bands: Vec<(f64, f64)>) -> Self {
        Self { bands }
    }

    pub fn eval(&self, p: f64) -> f64 {
        self.bands.iter().filter(|(a, b)| p >= *a && p <= *b).count() as f64
    }

    pub fn integral(&self) -> f64 {
        self.bands.iter().map(|(a, b)| (b - a).max(0.0)).sum()
    }

    fn edges(&self) -> Vec<f64> {
        self.bands.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// `U_ℏ(p, f) = (1/ℏ)∫f + 2∫_0^∞ min(q, |p|) f(sign(p) q) dq` for Brownian
/// motion modulated by `ℏ` times its local time at zero.
pub fn brownian_example_u(p: f64, f: &BandPayoff, hbar: f64) -> Result<f64> {
    if !(hbar > 0.0) {
        return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
    }
    let m = p.abs();
    let mut side = 0.0;
    for &(a, b) in &f.bands {
        // band seen along the ray sign(p)·q, q > 0
        let (lo, hi) = if p >= 0.0 { (a.max(0.0), b.max(0.0)) } else { ((-b).max(0.0), (-a).max(0.0)) };
        if hi <= lo {
            continue;
        }
        let q1 = hi.min(m);
        if q1 > lo {
            side += 0.5 * (q1 * q1 - lo * lo);
        }
        if hi > m {
            side += m * (hi - lo.max(m));
        }
    }
    Ok(f.integral() / hbar + 2.0 * side)
}

/// Finite-difference check of the Brownian resolvent equation
/// `-½ u'' = f` away from zero, plus the jump condition at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianResidual {
    /// Largest `|-½ u'' - f|` over grid points away from zero and the band edges.
    pub max_residual: f64,
    /// Allowed residual `10 δ² ‖f‖_∞`.
    pub bound: f64,
    /// `u'(0+) - u'(0-)` by one-sided second-order differences.
    pub jump: f64,
    /// `2ℏ u(0)`, which the jump must equal.
    pub jump_target: f64,
    pub continuity_gap: f64,
}

impl BrownianResidual {
    pub fn jump_error(&self) -> f64 {
        (self.jump - self.jump_target).abs()
    }
}

/// Evaluates the residual report on the grid `kδ`, `|kδ| ≤ extent`.
///
/// Integrating `f = ℏ δ_0 u - ½ u''` across zero gives the jump condition
/// `u'(0+) - u'(0-) = 2ℏ u(0)`.
pub fn brownian_ode_residual(f: &BandPayoff, hbar: f64, delta: f64, extent: f64) -> Result<BrownianResidual> {
    if !(delta > 0.0 && extent > 4.0 * delta) {
        return Err(Error::InvalidParameter("grid spacing must be positive and below extent/4".into()));
    }
    let u = |p: f64| brownian_example_u(p, f, hbar);
    let edges = f.edges();
    let n = (extent / delta).floor() as i64;
    let mut max_residual = 0.0f64;
    for k in -n..=n {
        let p = k as f64 * delta;
        if p.abs() <= 2.0 * delta || edges.iter().any(|e| (p - e).abs() <= 2.0 * delta) {
            continue;
        }
        let d2 = (u(p + delta)? - 2.0 * u(p)? + u(p - delta)?) / (delta * delta);
        max_residual = max_residual.max((-0.5 * d2 - f.eval(p)).abs());
    }
    let fmax = f.bands.iter().map(|_| 1.0).sum::<f64>().max(1e-300);
    let u0 = u(0.0)?;
    let right = (-3.0 * u0 + 4.0 * u(delta)? - u(2.0 * delta)?) / (2.0 * delta);
    let left = (3.0 * u0 - 4.0 * u(-delta)? + u(-2.0 * delta)?) / (2.0 * delta);
    let tiny = 1e-12;
    Ok(BrownianResidual {
        max_residual,
        bound: 10.0 * delta * delta * fmax,
        jump: right - left,
        jump_target: 2.0 * hbar * u0,
        continuity_gap: (u(tiny)? - u(-tiny)?).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_symmetric() {
        let g = MomentumGrid::new(20.0, &[1.0, 3.0, 2f64.sqrt()], 0.5, 8).unwrap();
        let n = g.len();
        for i in 0..n {
            assert!((g.nodes[i] + g.nodes[n - 1 - i]).abs() < 1e-12);
            assert!(g.weights[i] > 0.0);
        }
        assert!((g.weights.iter().sum::<f64>() - 40.0).abs() < 1e-10);
    }

    #[test]
    fn constant_modulator_gives_reciprocal() {
        let g = MomentumGrid::new(20.0, &[], 1.0, 8).unwrap();
        let s = solve_momentum_resolvent(0.25, &Modulator::Constant(2.0), &Payoff::Constant(1.0), &g).unwrap();
        assert!(s.values[0].iter().all(|u| (u - 0.5).abs() < 1e-10));
        let z = solve_momentum_resolvent(0.25, &Modulator::Constant(2.0), &Payoff::zero(), &g).unwrap();
        assert!(z.values[0].iter().all(|u| *u == 0.0));
        assert!(solve_momentum_resolvent(0.25, &Modulator::Constant(0.0), &Payoff::zero(), &g).is_err());
    }

    #[test]
    fn neumann_series_truncates_for_constant_modulator() {
        let g = MomentumGrid::new(20.0, &[], 1.0, 6).unwrap();
        let r = neumann_series_resolvent(0.5, &Modulator::Constant(1.0), 1.0, &Payoff::Constant(1.0), &g, 100, 1e-10)
            .unwrap();
        assert_eq!(r.terms, 1);
        assert!(r.values.iter().all(|u| (u - 1.0).abs() < 1e-10));
    }

    #[test]
    fn brownian_closed_form_examples() {
        let f = BandPayoff::new(vec![(0.0, 1.0)]);
        assert!((brownian_example_u(0.0, &f, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((brownian_example_u(2.0, &f, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((brownian_example_u(-1.0, &f, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(brownian_example_u(1.0, &f, 0.0).is_err());
    }

    #[test]
    fn brownian_residual_of_zero_payoff_vanishes() {
        let r = brownian_ode_residual(&BandPayoff::new(vec![]), 1.0, 0.01, 2.0).unwrap();
        assert_eq!(r.max_residual, 0.0);
        assert_eq!(r.jump_error(), 0.0);
    }
}
