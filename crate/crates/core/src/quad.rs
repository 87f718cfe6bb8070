//! Quadrature rules and special functions shared by the kernels and solvers.

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes by Newton iteration on the Legendre recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(mid + half * t)).sum::<f64>() * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Composite Gauss–Legendre nodes and weights over the sorted breakpoints,
/// with each gap split into panels no wider than `max_width`.
pub fn composite_rule(breaks: &[f64], max_width: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
    let gl = GaussLegendre::new(order);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for pair in breaks.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        let panels = ((b - a) / max_width).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        for k in 0..panels {
            let lo = a + k as f64 * h;
            let mid = lo + 0.5 * h;
            for (&t, &w) in gl.nodes.iter().zip(&gl.weights) {
                nodes.push(mid + 0.5 * h * t);
                weights.push(0.5 * h * w);
            }
        }
    }
    (nodes, weights)
}

const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * GK_WK[7];
    let mut gauss = fc * GK_WG[3];
    for j in 0..7 {
        let dx = h * GK_X[j];
        let s = f(c - dx) + f(c + dx);
        kron += GK_WK[j] * s;
        if j % 2 == 1 {
            gauss += GK_WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss–Kronrod (7/15) integration with absolute target
/// `abs_tol`. Fails after `max_intervals` subdivisions.
pub fn adaptive<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, max_intervals: usize) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut parts: Vec<(f64, f64, f64, f64)> = Vec::new();
    let (v, e) = gk15(&mut f, a, b);
    parts.push((a, b, v, e));
    loop {
        let total_err: f64 = parts.iter().map(|p| p.3).sum();
        if total_err <= abs_tol {
            break;
        }
        if parts.len() >= max_intervals {
            return Err(Error::NoConvergence(format!(
                "adaptive quadrature on [{a}, {b}] stalled at error {total_err:e} (target {abs_tol:e})"
            )));
        }
        let (idx, _) = parts.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (lo, hi, _, _) = parts.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
    }
    let mut sorted = parts;
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(sorted.iter().map(|p| p.2).sum())
}

/// Adaptive integration over consecutive breakpoints.
pub fn adaptive_pieces<F: FnMut(f64) -> f64>(
    mut f: F,
    breaks: &[f64],
    abs_tol: f64,
    max_intervals: usize,
) -> Result<f64> {
    let n = breaks.len().saturating_sub(1).max(1) as f64;
    let mut total = 0.0;
    for pair in breaks.windows(2) {
        total += adaptive(&mut f, pair[0], pair[1], abs_tol / n, max_intervals)?;
    }
    Ok(total)
}

/// Midpoint-shifted uniform nodes on the unit torus. The trapezoidal rule on
/// these nodes converges geometrically for smooth periodic integrands.
pub fn torus_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
}

/// Periodic trapezoid rule on the unit torus, doubling the node count until
/// successive values agree to `rel_tol`.
pub fn torus_integral<F: FnMut(f64) -> f64>(mut f: F, rel_tol: f64) -> Result<f64> {
    let mut n = 64;
    let mut prev: f64 = torus_nodes(n).into_iter().map(&mut f).sum::<f64>() / n as f64;
    while n < 1 << 20 {
        n *= 2;
        let cur = torus_nodes(n).into_iter().map(&mut f).sum::<f64>() / n as f64;
        if (cur - prev).abs() <= rel_tol * cur.abs().max(1e-300) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::NoConvergence(format!("torus integral did not settle to {rel_tol:e}")))
}

/// Gauss–Legendre on `cells` equal cells of the unit torus, halving the cells
/// until successive values agree to `rel_tol`. Suited to integrands that are
/// only piecewise smooth across the cell edges.
pub fn torus_integral_cells<F: FnMut(f64) -> f64>(mut f: F, cells: usize, rel_tol: f64) -> Result<f64> {
    let gl = GaussLegendre::new(8);
    let run = |m: usize, f: &mut F| -> f64 {
        (0..m).map(|k| gl.integrate(k as f64 / m as f64, (k + 1) as f64 / m as f64, &mut *f)).sum()
    };
    let mut m = cells.max(1);
    let mut prev = run(m, &mut f);
    while m < 1 << 18 {
        m *= 2;
        let cur = run(m, &mut f);
        if (cur - prev).abs() <= rel_tol * cur.abs().max(1e-300) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::NoConvergence(format!("cellwise torus integral did not settle to {rel_tol:e}")))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `erf(x / sqrt 2) = 2 Phi(x) - 1`, accurate near zero.
pub fn centered_normal_mass(x: f64) -> f64 {
    libm::erf(x / std::f64::consts::SQRT_2)
}
