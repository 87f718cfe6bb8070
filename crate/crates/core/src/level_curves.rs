//! Geometry of the space of level-curve components: the map `G_V`, the
//! orbit measures, the reduced jump kernel `Ĵ_λ`, its escape rate `Ê_λ`, and
//! the orbit average `f ↦ f̂`.
//!
//! A component is labelled `γ = (ρ, ε)` with `ρ = √(2H)`. Revolving orbits
//! (`ρ² > 2 sup V`) carry `ε = sign p`; trapped orbits carry the index of
//! their well, wells being ordered by the torus position of their left end.
//!
//! Orbit averages use the disintegration of Lebesgue measure `dx dp` along
//! the level sets: on a revolving orbit `dx dp = dρ · (ρ/|p|) dx`, so the
//! conditional law in `x` has density proportional to `1/|p(x)|`. This is the
//! time-occupation measure `κ_γ`, and `f̂(γ)` is the `κ_γ` average of `f`.

use crate::error::{Error, Result};
use crate::model::{escape_rate, hamiltonian, jump_kernel, ModelParams, Payoff, PhaseState, Potential, PotentialKind};
use crate::quad;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Half-width of the excluded energy band around a critical level.
pub const SEPARATRIX_TOL: f64 = 1e-9;

/// Margin kept above `√(2 sup V)` for reduced-domain radii.
pub const BRANCH_MARGIN: f64 = 1e-6;

/// A level-curve component `γ = (ρ, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveState {
    pub rho: f64,
    pub eps: i32,
}

impl CurveState {
    pub fn new(rho: f64, eps: i32) -> Self {
        Self { rho, eps }
    }

    pub fn energy(&self) -> f64 {
        0.5 * self.rho * self.rho
    }

    pub fn is_revolving(&self, v: &Potential) -> bool {
        self.rho * self.rho > 2.0 * v.sup()
    }

    /// `ε ρ χ(ρ ≥ l)`: the momentum a high-energy component stands for.
    pub fn quasi_momentum(&self, params: &ModelParams) -> f64 {
        if self.rho >= params.l {
            self.eps as f64 * self.rho
        } else {
            0.0
        }
    }
}

/// Radius below which the reduced kernel would need two momentum branches.
pub fn branch_threshold(v: &Potential) -> f64 {
    (2.0 * v.sup()).sqrt()
}

/// Smallest radius admitted in the reduced domain.
pub fn reduced_floor(v: &Potential) -> f64 {
    if v.is_zero() {
        0.0
    } else {
        branch_threshold(v) + BRANCH_MARGIN
    }
}

/// Critical energy levels: local maxima of `V`.
pub fn critical_levels(v: &Potential) -> Vec<f64> {
    match v.kind() {
        PotentialKind::Zero => Vec::new(),
        PotentialKind::Cosine { v0 } => vec![*v0],
        PotentialKind::Tabulated(_) => {
            let n = 4096;
            let vals: Vec<f64> = (0..n).map(|k| v.value(k as f64 / n as f64)).collect();
            let mut out: Vec<f64> = (0..n)
                .filter(|&k| vals[k] >= vals[(k + n - 1) % n] && vals[k] > vals[(k + 1) % n])
                .map(|k| vals[k])
                .collect();
            out.push(v.sup());
            out.sort_by(f64::total_cmp);
            out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            out
        }
    }
}

/// Maximal arcs `[a, b]` of `{V ≤ energy}` on the torus, sorted by `a ∈ [0,1)`.
/// `b` may exceed 1 for arcs that wrap.
pub fn wells(v: &Potential, energy: f64) -> Vec<(f64, f64)> {
    let n = 4096;
    let below = |x: f64| v.value(crate::model::wrap(x)) <= energy;
    let refine = |mut lo: f64, mut hi: f64| {
        let lo_below = below(lo);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if below(mid) == lo_below {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    for k in 0..n {
        let (a, b) = (k as f64 / n as f64, (k + 1) as f64 / n as f64);
        match (below(a), below(b)) {
            (false, true) => starts.push(refine(a, b)),
            (true, false) => ends.push(refine(a, b)),
            _ => {}
        }
    }
    if starts.is_empty() {
        return if below(0.0) { vec![(0.0, 1.0)] } else { Vec::new() };
    }
    let mut arcs = Vec::new();
    for &s in &starts {
        let e = ends.iter().map(|&e| if e > s { e } else { e + 1.0 }).fold(f64::INFINITY, f64::min);
        arcs.push((crate::model::wrap(s), e - (s - crate::model::wrap(s))));
    }
    arcs.sort_by(|a, b| a.0.total_cmp(&b.0));
    arcs
}

fn well_index(arcs: &[(f64, f64)], x: f64) -> Option<usize> {
    arcs.iter().position(|&(a, b)| (x - a).rem_euclid(1.0) <= b - a)
}

/// `G_V(s)`: the component containing `s`.
pub fn curve_state(s: &PhaseState, params: &ModelParams) -> Result<CurveState> {
    let v = &params.potential;
    let energy = hamiltonian(s, v);
    let rho = (2.0 * energy).sqrt();
    if v.is_zero() {
        return Ok(CurveState::new(rho, if s.p < 0.0 { -1 } else { 1 }));
    }
    for crit in critical_levels(v) {
        if (energy - crit).abs() <= SEPARATRIX_TOL {
            return Err(Error::Separatrix { energy, critical: crit, tol: SEPARATRIX_TOL });
        }
    }
    if energy > v.sup() {
        return Ok(CurveState::new(rho, if s.p < 0.0 { -1 } else { 1 }));
    }
    let arcs = wells(v, energy);
    let idx = well_index(&arcs, s.x).unwrap_or(0);
    Ok(CurveState::new(rho, idx as i32))
}

/// The state on a revolving orbit `γ` above the torus point `x`.
pub fn phase_state_on(gamma: &CurveState, x: f64, params: &ModelParams) -> Result<PhaseState> {
    let v = &params.potential;
    if !gamma.is_revolving(v) && !v.is_zero() {
        return Err(Error::TrappedOrbit { rho: gamma.rho });
    }
    let p = (gamma.rho * gamma.rho - 2.0 * v.value(x)).max(0.0).sqrt();
    Ok(PhaseState::new(x, if gamma.eps < 0 { -p } else { p }))
}

fn require_revolving(gamma: &CurveState, v: &Potential) -> Result<()> {
    if v.is_zero() || gamma.is_revolving(v) {
        Ok(())
    } else {
        Err(Error::TrappedOrbit { rho: gamma.rho })
    }
}

/// Density of `κ_γ` in `x`: `(ρ² - 2V(x))^{-1/2}` normalized over the torus.
pub fn kappa_density(gamma: &CurveState, x: f64, params: &ModelParams) -> Result<f64> {
    let v = &params.potential;
    require_revolving(gamma, v)?;
    if v.is_zero() {
        return Ok(1.0);
    }
    let r2 = gamma.rho * gamma.rho;
    let z = v.torus_integral(|y| 1.0 / (r2 - 2.0 * v.value(y)).sqrt(), 1e-12)?;
    Ok(1.0 / ((r2 - 2.0 * v.value(x)).sqrt() * z))
}

/// Fixed-node discretization of a revolving orbit: torus nodes with the
/// normalized weights of `κ_γ` (which also serve as those of `η_γ`) and
/// the orbit period.
#[derive(Debug, Clone)]
pub struct CurveQuadrature {
    pub gamma: CurveState,
    pub xs: Vec<f64>,
    pub momenta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub period: f64,
}

impl CurveQuadrature {
    pub fn new(gamma: &CurveState, params: &ModelParams, nodes: usize) -> Result<Self> {
        let v = &params.potential;
        require_revolving(gamma, v)?;
        let r2 = gamma.rho * gamma.rho;
        let sign = if gamma.eps < 0 { -1.0 } else { 1.0 };
        let (xs, raw): (Vec<f64>, Vec<f64>) = match v.kind() {
            PotentialKind::Zero => (vec![0.0], vec![1.0]),
            PotentialKind::Tabulated(t) => {
                let cells = t.values.len() * nodes.div_ceil(t.values.len() * 8).max(1);
                let gl = quad::GaussLegendre::new(8);
                let mut xs = Vec::with_capacity(cells * 8);
                let mut ws = Vec::with_capacity(cells * 8);
                for c in 0..cells {
                    for (t, w) in gl.nodes.iter().zip(&gl.weights) {
                        let x = (c as f64 + 0.5 + 0.5 * t) / cells as f64;
                        xs.push(x);
                        ws.push(0.5 * w / cells as f64 / (r2 - 2.0 * v.value(x)).sqrt());
                    }
                }
                (xs, ws)
            }
            _ => {
                let xs = quad::torus_nodes(nodes);
                let ws = xs.iter().map(|&x| 1.0 / (nodes as f64 * (r2 - 2.0 * v.value(x)).sqrt())).collect();
                (xs, ws)
            }
        };
        let period: f64 = if v.is_zero() { 1.0 / gamma.rho } else { raw.iter().sum() };
        let total: f64 = raw.iter().sum();
        let kappa = raw.iter().map(|w| w / total).collect();
        let momenta = xs.iter().map(|&x| sign * (r2 - 2.0 * v.value(x)).max(0.0).sqrt()).collect();
        Ok(Self { gamma: *gamma, xs, momenta, kappa, period })
    }

    /// Orbit average of `g(x, p)`.
    pub fn average<F: FnMut(f64, f64) -> f64>(&self, mut g: F) -> f64 {
        self.xs.iter().zip(&self.momenta).zip(&self.kappa).map(|((&x, &p), &w)| w * g(x, p)).sum()
    }
}

/// Orbit average with node doubling until two successive values agree to
/// `rel_tol` (absolute below unit scale).
fn orbit_average<F: FnMut(f64, f64) -> f64>(
    gamma: &CurveState,
    params: &ModelParams,
    rel_tol: f64,
    mut g: F,
) -> Result<f64> {
    if params.potential.is_zero() {
        return Ok(CurveQuadrature::new(gamma, params, 1)?.average(g));
    }
    let mut n = 64;
    let mut prev = CurveQuadrature::new(gamma, params, n)?.average(&mut g);
    while n < 1 << 18 {
        n *= 2;
        let cur = CurveQuadrature::new(gamma, params, n)?.average(&mut g);
        if (cur - prev).abs() <= rel_tol * cur.abs().max(1.0) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::NoConvergence(format!("orbit average at rho = {} did not settle", gamma.rho)))
}

/// Lebesgue mass density of the component: `∫ (ρ/|p|) dx` over the orbit, so
/// that `dx dp` pushes forward to `Z(γ) dρ`. For trapped orbits both momentum
/// branches are included.
pub fn orbit_mass(gamma: &CurveState, params: &ModelParams) -> Result<f64> {
    orbit_integral(gamma, params, |_, _| 1.0)
}

/// `∫_component g(x, p) (ρ/|p|) dx`, the disintegrated Lebesgue integral of
/// `g` over one component.
pub fn orbit_integral<F: FnMut(f64, f64) -> f64>(gamma: &CurveState, params: &ModelParams, mut g: F) -> Result<f64> {
    let v = &params.potential;
    let rho = gamma.rho;
    let r2 = rho * rho;
    if v.is_zero() || gamma.is_revolving(v) {
        let sign = if gamma.eps < 0 { -1.0 } else { 1.0 };
        let breaks: Vec<f64> = match v.kind() {
            PotentialKind::Tabulated(t) => (0..=t.values.len()).map(|k| k as f64 / t.values.len() as f64).collect(),
            _ => vec![0.0, 0.5, 1.0],
        };
        return quad::adaptive_pieces(
            |x| {
                let p = (r2 - 2.0 * v.value(x)).max(0.0).sqrt();
                g(x, sign * p) * rho / p
            },
            &breaks,
            1e-10 * (1.0 + rho),
            20_000,
        );
    }
    let energy = 0.5 * r2;
    let arcs = wells(v, energy);
    let &(a, b) = arcs
        .get(gamma.eps.max(0) as usize)
        .ok_or_else(|| Error::InvalidParameter(format!("no well {} at energy {energy}", gamma.eps)))?;
    // x = a + (b-a)(1-cos θ)/2 removes the inverse-square-root endpoint singularities
    let half = 0.5 * (b - a);
    quad::adaptive(
        |theta| {
            let x = a + half * (1.0 - theta.cos());
            let xw = crate::model::wrap(x);
            let p = (r2 - 2.0 * v.value(xw)).max(1e-300).sqrt();
            let dx = half * theta.sin();
            (g(xw, p) + g(xw, -p)) * rho / p * dx
        },
        0.0,
        PI,
        1e-10 * (1.0 + rho),
        20_000,
    )
}

/// `f̂(γ)`, the orbit average of `f` on the component `γ`.
pub fn hat_map(f: &Payoff, gamma: &CurveState, params: &ModelParams) -> Result<f64> {
    let v = &params.potential;
    if v.is_zero() {
        let p = if gamma.eps < 0 { -gamma.rho } else { gamma.rho };
        return Ok(f.eval(&PhaseState::new(0.0, p), v));
    }
    if matches!(f, Payoff::Constant(_) | Payoff::EnergyBand { .. }) {
        let s =
            if gamma.is_revolving(v) { phase_state_on(gamma, 0.0, params)? } else { PhaseState::new(v.argmin(), 0.0) };
        let s = PhaseState { p: (gamma.rho * gamma.rho - 2.0 * v.value(s.x)).max(0.0).sqrt(), ..s };
        return Ok(f.eval(&s, v));
    }
    for crit in critical_levels(v) {
        if (gamma.energy() - crit).abs() <= SEPARATRIX_TOL {
            return Err(Error::Separatrix { energy: gamma.energy(), critical: crit, tol: SEPARATRIX_TOL });
        }
    }
    if let (Payoff::IndicatorBand { lo, hi }, true) = (f, gamma.is_revolving(v)) {
        let r2 = gamma.rho * gamma.rho;
        let sign = if gamma.eps < 0 { -1.0 } else { 1.0 };
        let (a, b) = (sign * (r2 - 2.0 * v.sup()).sqrt(), sign * (r2 - 2.0 * v.inf()).sqrt());
        let (pmin, pmax) = (a.min(b), a.max(b));
        if pmin >= *lo && pmax <= *hi {
            return Ok(1.0);
        }
        if pmax < *lo || pmin > *hi {
            return Ok(0.0);
        }
    }
    let mass = orbit_mass(gamma, params)?;
    let total = orbit_integral(gamma, params, |x, p| f.eval(&PhaseState { x, p }, v))?;
    Ok(total / mass)
}

fn require_single_branch(rho_new: f64, v: &Potential) -> Result<()> {
    let threshold = branch_threshold(v);
    if !v.is_zero() && rho_new <= threshold {
        return Err(Error::TwoBranch { rho: rho_new, threshold });
    }
    Ok(())
}

/// `Ĵ_λ(γ, γ')` as a density in `ρ'` on the branch `ε'`:
/// `∫ κ_γ(dx) J_λ(p(x), p'(x)) ρ'/|p'(x)|` with `p'(x) = ε'√(ρ'² - 2V(x))`.
pub fn fw_jump_kernel(lambda: f64, gamma: &CurveState, gamma_new: &CurveState, params: &ModelParams) -> Result<f64> {
    let v = &params.potential;
    require_revolving(gamma, v)?;
    require_single_branch(gamma_new.rho, v)?;
    let r2 = gamma_new.rho * gamma_new.rho;
    let sign = if gamma_new.eps < 0 { -1.0 } else { 1.0 };
    orbit_average(gamma, params, 1e-10, |x, p| {
        let q = (r2 - 2.0 * v.value(x)).sqrt();
        jump_kernel(lambda, p, sign * q) * gamma_new.rho / q
    })
}

/// `Ê_λ(γ) = ∫ κ_γ(dx) E_λ(p(x))`.
pub fn fw_escape_rate(lambda: f64, gamma: &CurveState, params: &ModelParams) -> Result<f64> {
    require_revolving(gamma, &params.potential)?;
    orbit_average(gamma, params, 1e-12, |_, p| escape_rate(lambda, p))
}

/// `T̂_λ = Ĵ_λ / Ê_λ`.
pub fn fw_skeleton_kernel(
    lambda: f64,
    gamma: &CurveState,
    gamma_new: &CurveState,
    params: &ModelParams,
) -> Result<f64> {
    Ok(fw_jump_kernel(lambda, gamma, gamma_new, params)? / fw_escape_rate(lambda, gamma, params)?)
}

/// Rate of jumps from `γ` that land below the reduced-domain floor, where
/// the reduced kernel would need both momentum branches.
pub fn fw_exit_rate(lambda: f64, gamma: &CurveState, params: &ModelParams) -> Result<f64> {
    let v = &params.potential;
    require_revolving(gamma, v)?;
    if v.is_zero() {
        return Ok(0.0);
    }
    let floor2 = reduced_floor(v).powi(2);
    orbit_average(gamma, params, 1e-10, |x, p| {
        let cap = (floor2 - 2.0 * v.value(x)).max(0.0).sqrt();
        kernel_mass_between(lambda, p, -cap, cap)
    })
}

/// `∫_lo^hi J_λ(p, q) dq` in closed form via the sampler substitution.
pub fn kernel_mass_between(lambda: f64, p: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let a = lambda * p;
    let to_u = |q: f64| 0.5 * ((1.0 + lambda) * q - (1.0 - lambda) * p);
    // antiderivative of |a-u| e^{-u²/2}, continuous at u = a
    let prim = |u: f64| {
        let g = (2.0 * PI).sqrt() * quad::normal_cdf(u);
        let e = (-0.5 * u * u).exp();
        if u <= a {
            a * g + e
        } else {
            let ga = (2.0 * PI).sqrt() * quad::normal_cdf(a);
            let ea = (-0.5 * a * a).exp();
            (a * ga + ea) + (ea - e) - a * (g - ga)
        }
    };
    // J dq = (1+λ)·2(a-u)/(1+λ)·e^{-u²/2}·2/(1+λ) du
    4.0 / (1.0 + lambda) * (prim(to_u(hi)) - prim(to_u(lo)))
}
