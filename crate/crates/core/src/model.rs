//! Closed-form model ingredients: the periodic potential, the Hamiltonian,
//! the collision kernel `J_λ`, its escape rate, the modulator `h`, payoffs
//! and regime diagnostics.
//!
//! Units follow the thermostat normalization used throughout the crate: gas
//! temperature one and gas density `2 (2π)^{1/2}`, so that at `λ = 0` the
//! kernel reduces to the Lévy density `j(q) = |q| e^{-q²/8}` of total mass 8.

use crate::error::{Error, Result};
use crate::quad;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

/// A point `(x, p)` on the cylinder `T × R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: f64,
    pub p: f64,
}

impl PhaseState {
    /// Builds a state with `x` reduced into `[0, 1)`.
    pub fn new(x: f64, p: f64) -> Self {
        Self { x: wrap(x), p }
    }
}

/// Reduces a torus coordinate into `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Samples of a periodic potential on a uniform grid, interpolated by cubic
/// Hermite splines through the given values and slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTable {
    pub values: Vec<f64>,
    pub slopes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    Zero,
    /// `V(x) = (v0/2)(1 - cos 2πx)`, so `sup V = v0` at `x = 1/2`.
    Cosine {
        v0: f64,
    },
    Tabulated(PotentialTable),
}

/// A nonnegative, 1-periodic, C¹ potential with cached extrema.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    kind: PotentialKind,
    sup: f64,
    inf: f64,
    argmin: f64,
    argmax: f64,
}

impl Potential {
    pub fn zero() -> Self {
        Self { kind: PotentialKind::Zero, sup: 0.0, inf: 0.0, argmin: 0.0, argmax: 0.0 }
    }

    pub fn cosine(v0: f64) -> Result<Self> {
        if !(v0 >= 0.0 && v0.is_finite()) {
            return Err(Error::InvalidParameter(format!("cosine amplitude must be >= 0, got {v0}")));
        }
        if v0 == 0.0 {
            return Ok(Self::zero());
        }
        Ok(Self { kind: PotentialKind::Cosine { v0 }, sup: v0, inf: 0.0, argmin: 0.0, argmax: 0.5 })
    }

    /// Tabulated potential on the grid `x_k = k/n`. Values must be
    /// nonnegative everywhere, including between the nodes.
    pub fn tabulated(values: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        if values.len() < 4 || values.len() != slopes.len() {
            return Err(Error::InvalidParameter("tabulated potential needs >= 4 nodes and one slope per value".into()));
        }
        if values.iter().chain(&slopes).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("tabulated potential has non-finite entries".into()));
        }
        let mut pot = Self {
            kind: PotentialKind::Tabulated(PotentialTable { values, slopes }),
            sup: 0.0,
            inf: 0.0,
            argmin: 0.0,
            argmax: 0.0,
        };
        let (inf, argmin) = pot.refine_extremum(false);
        let (sup, argmax) = pot.refine_extremum(true);
        if inf < -1e-12 {
            return Err(Error::InvalidParameter(format!(
                "tabulated potential dips below zero (min {inf:e} at x = {argmin})"
            )));
        }
        pot.inf = inf.max(0.0);
        pot.sup = sup;
        pot.argmin = argmin;
        pot.argmax = argmax;
        Ok(pot)
    }

    pub fn from_kind(kind: PotentialKind) -> Result<Self> {
        match kind {
            PotentialKind::Zero => Ok(Self::zero()),
            PotentialKind::Cosine { v0 } => Self::cosine(v0),
            PotentialKind::Tabulated(t) => Self::tabulated(t.values, t.slopes),
        }
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, PotentialKind::Zero)
    }

    pub fn sup(&self) -> f64 {
        self.sup
    }

    pub fn inf(&self) -> f64 {
        self.inf
    }

    /// Location of the global minimum.
    pub fn argmin(&self) -> f64 {
        self.argmin
    }

    /// Location of the global maximum.
    pub fn argmax(&self) -> f64 {
        self.argmax
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Cosine { v0 } => 0.5 * v0 * (1.0 - (TAU * x).cos()),
            PotentialKind::Tabulated(t) => hermite(t, x).0,
        }
    }

    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Cosine { v0 } => PI * v0 * (TAU * x).sin(),
            PotentialKind::Tabulated(t) => hermite(t, x).1,
        }
    }

    /// Curvature scale `sqrt(max |V''|)` used for step control.
    pub fn frequency(&self) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Cosine { v0 } => (2.0 * PI * PI * v0).sqrt(),
            PotentialKind::Tabulated(t) => {
                let n = t.values.len() as f64;
                let max_curv = t
                    .slopes
                    .iter()
                    .zip(t.slopes.iter().cycle().skip(1))
                    .map(|(a, b)| ((b - a) * n).abs())
                    .fold(0.0, f64::max);
                max_curv.sqrt()
            }
        }
    }

    /// `∫_T g(x) dx` for an integrand built from this potential, using a rule
    /// matched to its smoothness.
    pub fn torus_integral<F: FnMut(f64) -> f64>(&self, g: F, rel_tol: f64) -> Result<f64> {
        match &self.kind {
            PotentialKind::Tabulated(t) => quad::torus_integral_cells(g, t.values.len(), rel_tol),
            _ => quad::torus_integral(g, rel_tol),
        }
    }

    fn refine_extremum(&self, maximize: bool) -> (f64, f64) {
        let n = 4096;
        let sign = if maximize { 1.0 } else { -1.0 };
        let (mut best_x, mut best) = (0.0, f64::NEG_INFINITY);
        for k in 0..n {
            let x = k as f64 / n as f64;
            let v = sign * self.value(x);
            if v > best {
                best = v;
                best_x = x;
            }
        }
        // golden-section refinement on the bracketing cell
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (best_x - 1.0 / n as f64, best_x + 1.0 / n as f64);
        for _ in 0..80 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if sign * self.value(wrap(c)) > sign * self.value(wrap(d)) {
                b = d;
            } else {
                a = c;
            }
        }
        let x = wrap(0.5 * (a + b));
        let v = sign * self.value(x);
        if v > best {
            (sign * v, x)
        } else {
            (sign * best, best_x)
        }
    }
}

impl fmt::Display for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            PotentialKind::Zero => write!(f, "zero"),
            PotentialKind::Cosine { v0 } => write!(f, "cosine(v0={v0})"),
            PotentialKind::Tabulated(t) => write!(f, "tabulated({} nodes)", t.values.len()),
        }
    }
}

fn hermite(t: &PotentialTable, x: f64) -> (f64, f64) {
    let n = t.values.len();
    let h = 1.0 / n as f64;
    let xs = wrap(x) * n as f64;
    let k = (xs.floor() as usize).min(n - 1);
    let s = xs - k as f64;
    let (y0, y1) = (t.values[k], t.values[(k + 1) % n]);
    let (m0, m1) = (t.slopes[k] * h, t.slopes[(k + 1) % n] * h);
    let s2 = s * s;
    let s3 = s2 * s;
    let v = (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * m1;
    let dv = (6.0 * s2 - 6.0 * s) * y0
        + (3.0 * s2 - 4.0 * s + 1.0) * m0
        + (-6.0 * s2 + 6.0 * s) * y1
        + (3.0 * s2 - 2.0 * s) * m1;
    (v, dv / h)
}

/// Mass ratio, potential and the trapping threshold `l = 1 + 2 sup V`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub lambda: f64,
    pub potential: Potential,
    pub l: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, potential: Potential) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidParameter(format!("lambda must lie in (0, 1], got {lambda}")));
        }
        let l = 1.0 + 2.0 * potential.sup();
        Ok(Self { lambda, potential, l })
    }

    pub fn hamiltonian(&self, s: &PhaseState) -> f64 {
        hamiltonian(s, &self.potential)
    }
}

/// `H = p²/2 + V(x)`.
#[inline]
pub fn hamiltonian(s: &PhaseState, v: &Potential) -> f64 {
    0.5 * s.p * s.p + v.value(s.x)
}

/// Collision kernel `J_λ(p, p') = (1+λ)|p-p'| exp(-½((1-λ)p/2 - (1+λ)p'/2)²)`.
#[inline]
pub fn jump_kernel(lambda: f64, p: f64, p_new: f64) -> f64 {
    let z = 0.5 * ((1.0 - lambda) * p - (1.0 + lambda) * p_new);
    (1.0 + lambda) * (p - p_new).abs() * (-0.5 * z * z).exp()
}

/// Lévy density `j(q) = |q| e^{-q²/8}` of the `λ = 0` kernel.
#[inline]
pub fn levy_density(q: f64) -> f64 {
    q.abs() * (-q * q / 8.0).exp()
}

/// Escape rate `E_λ(p) = ∫ J_λ(p, p') dp'` in closed form:
/// `4/(1+λ) [2 e^{-a²/2} + a √(2π) (2Φ(a) - 1)]` with `a = λ|p|`.
#[inline]
pub fn escape_rate(lambda: f64, p: f64) -> f64 {
    let a = lambda * p.abs();
    4.0 / (1.0 + lambda) * (2.0 * (-0.5 * a * a).exp() + a * (2.0 * PI).sqrt() * quad::centered_normal_mass(a))
}

/// Escape rate by adaptive quadrature of the kernel over ten kernel widths
/// around its Gaussian center, with a breakpoint at the kink `p' = p`.
pub fn escape_rate_quadrature(lambda: f64, p: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let center = (1.0 - lambda) * p / (1.0 + lambda);
    let width = 2.0 / (1.0 + lambda);
    let (lo, hi) = (center - 10.0 * width, center + 10.0 * width);
    let mut breaks = vec![lo, hi];
    if p > lo && p < hi {
        breaks.insert(1, p);
    }
    // scale for the relative target: the closed form is only used to size the
    // tolerance, the value itself comes from the quadrature
    let scale = 8.0 / (1.0 + lambda) * (1.0 + lambda * p.abs());
    quad::adaptive_pieces(|q| jump_kernel(lambda, p, q), &breaks, tol * scale * 0.1, 4000)
}

/// Momentum-scale regime relative to `1/λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Contractive,
    Drift,
    RandomWalk,
}

pub const DEFAULT_REGIME_MULTIPLIER: f64 = 4.0;

/// Classifies `|p|` against `[1/(Kλ), K/λ]`.
pub fn regime_classify(lambda: f64, p: f64, multiplier: f64) -> Regime {
    let a = p.abs();
    if a > multiplier / lambda {
        Regime::Contractive
    } else if a < 1.0 / (lambda * multiplier) {
        Regime::RandomWalk
    } else {
        Regime::Drift
    }
}

/// `e^{-λp²/2} J_λ(p,p') - e^{-λp'²/2} J_λ(p',p)`; identically zero since the
/// exponent is a symmetric quadratic form.
pub fn detailed_balance_residual(lambda: f64, p: f64, p_new: f64) -> f64 {
    (-0.5 * lambda * p * p).exp() * jump_kernel(lambda, p, p_new)
        - (-0.5 * lambda * p_new * p_new).exp() * jump_kernel(lambda, p_new, p)
}

/// `(1+λ) e^{(λ/4)(p² - p'²)} J_0(p,p') - J_λ(p,p')`, nonnegative for all inputs.
pub fn db_inequality_margin(lambda: f64, p: f64, p_new: f64) -> f64 {
    (1.0 + lambda) * (0.25 * lambda * (p * p - p_new * p_new)).exp() * jump_kernel(0.0, p, p_new)
        - jump_kernel(lambda, p, p_new)
}

/// A function on phase space with a declared upper bound.
pub type PhaseFn = Arc<dyn Fn(&PhaseState) -> f64 + Send + Sync>;

/// The modulator `h` of the state-modulated resolvent.
#[derive(Clone)]
pub enum Modulator {
    /// `χ(H ≤ level)`, inclusive at the boundary.
    EnergyIndicator {
        level: f64,
    },
    /// `χ(|p| ≤ bound)`, the momentum-only analogue.
    MomentumIndicator {
        bound: f64,
    },
    Constant(f64),
    Custom {
        func: PhaseFn,
        sup: f64,
        witness: PhaseState,
    },
}

impl fmt::Debug for Modulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EnergyIndicator { level } => write!(f, "EnergyIndicator({level})"),
            Self::MomentumIndicator { bound } => write!(f, "MomentumIndicator({bound})"),
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Custom { sup, .. } => write!(f, "Custom(sup={sup})"),
        }
    }
}

impl Modulator {
    /// The default choice `χ(H ≤ l)`.
    pub fn standard(params: &ModelParams) -> Self {
        Self::EnergyIndicator { level: params.l }
    }

    pub fn custom(func: PhaseFn, sup: f64, witness: PhaseState) -> Result<Self> {
        if !(sup > 0.0) || func(&witness) <= 0.0 {
            return Err(Error::InvalidParameter(
                "custom modulator needs a positive bound and a witness with h > 0".into(),
            ));
        }
        Ok(Self::Custom { func, sup, witness })
    }

    pub fn sup(&self) -> f64 {
        match self {
            Self::EnergyIndicator { .. } | Self::MomentumIndicator { .. } => 1.0,
            Self::Constant(c) => *c,
            Self::Custom { sup, .. } => *sup,
        }
    }

    /// Whether `h` depends on the state only through the energy, so it is
    /// constant along flow segments.
    pub fn is_energy_function(&self) -> bool {
        matches!(self, Self::EnergyIndicator { .. } | Self::Constant(_))
    }

    #[inline]
    pub fn eval(&self, s: &PhaseState, v: &Potential) -> f64 {
        match self {
            Self::EnergyIndicator { level } => {
                if hamiltonian(s, v) <= *level {
                    1.0
                } else {
                    0.0
                }
            }
            Self::MomentumIndicator { bound } => {
                if s.p.abs() <= *bound {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Constant(c) => *c,
            Self::Custom { func, .. } => func(s),
        }
    }
}

/// `h(s)` for the given modulator.
pub fn modulator_eval(h: &Modulator, s: &PhaseState, params: &ModelParams) -> f64 {
    h.eval(s, &params.potential)
}

/// A bounded nonnegative payoff `f` on phase space.
#[derive(Clone)]
pub enum Payoff {
    /// `χ(lo ≤ p ≤ hi)`.
    IndicatorBand {
        lo: f64,
        hi: f64,
    },
    /// `χ(lo ≤ H ≤ hi)`.
    EnergyBand {
        lo: f64,
        hi: f64,
    },
    Constant(f64),
    Custom {
        func: PhaseFn,
        sup: f64,
    },
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::IndicatorBand { lo, hi } => write!(f, "IndicatorBand[{lo}, {hi}]"),
            Self::EnergyBand { lo, hi } => write!(f, "EnergyBand[{lo}, {hi}]"),
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Custom { sup, .. } => write!(f, "Custom(sup={sup})"),
        }
    }
}

impl Payoff {
    pub fn zero() -> Self {
        Self::Constant(0.0)
    }

    pub fn sup(&self) -> f64 {
        match self {
            Self::IndicatorBand { .. } | Self::EnergyBand { .. } => 1.0,
            Self::Constant(c) => *c,
            Self::Custom { sup, .. } => *sup,
        }
    }

    pub fn is_energy_function(&self) -> bool {
        matches!(self, Self::EnergyBand { .. } | Self::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Constant(c) if *c == 0.0)
    }

    #[inline]
    pub fn eval(&self, s: &PhaseState, v: &Potential) -> f64 {
        match self {
            Self::IndicatorBand { lo, hi } => {
                if s.p >= *lo && s.p <= *hi {
                    1.0
                } else {
                    0.0
                }
            }
            Self::EnergyBand { lo, hi } => {
                let e = hamiltonian(s, v);
                if e >= *lo && e <= *hi {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Constant(c) => *c,
            Self::Custom { func, .. } => func(s),
        }
    }

    /// Momentum-only evaluation (`x` irrelevant, `V = 0`).
    #[inline]
    pub fn eval_momentum(&self, p: f64) -> f64 {
        self.eval(&PhaseState { x: 0.0, p }, &Potential::zero())
    }
}
