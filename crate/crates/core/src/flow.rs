//! Hamiltonian flow `ẋ = p`, `ṗ = -V'(x)` on the cylinder.
//!
//! Fourth-order Yoshida composition of Störmer–Verlet with a fixed step per
//! call, sized from the energy shell so that forward and reversed runs use
//! the same step sequence. On revolving orbits the momentum is projected
//! back onto the energy shell after every step.

use crate::error::{Error, Result};
use crate::model::{hamiltonian, wrap, ModelParams, PhaseState};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Step control and caps shared by the simulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Upper bound on a single integrator step.
    pub max_step: f64,
    /// Phase advance per step, as a fraction of one radian of the fastest
    /// local oscillation.
    pub step_factor: f64,
    /// Allowed energy drift per unit time.
    pub energy_tol: f64,
    /// Cap on the number of events per trajectory.
    pub event_cap: usize,
    /// Cap on the simulated time per trajectory.
    pub time_cap: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { max_step: 0.05, step_factor: 0.05, energy_tol: 1e-9, event_cap: 1_000_000, time_cap: 1e6 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_step > 0.0
            && self.step_factor > 0.0
            && self.energy_tol > 0.0
            && self.event_cap > 0
            && self.time_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("non-positive simulation tolerance or cap: {self:?}")))
        }
    }
}

const CBRT2: f64 = 1.259_921_049_894_873_2;
const W1: f64 = 1.0 / (2.0 - CBRT2);
const W0: f64 = -CBRT2 / (2.0 - CBRT2);
const YOSHIDA: [f64; 3] = [W1, W0, W1];

/// Number of steps used to cover `dt` on the shell through `s`.
pub fn step_count(s: &PhaseState, dt: f64, params: &ModelParams, cfg: &SimConfig) -> usize {
    let v = &params.potential;
    let e = hamiltonian(s, v);
    let vmax = (2.0 * (e - v.inf()).max(0.0)).sqrt();
    // trapped orbits are not projected onto the shell and need a finer step
    let factor = if e > v.sup() { cfg.step_factor } else { 0.5 * cfg.step_factor };
    let h = cfg.max_step.min(factor / (TAU * vmax + v.frequency()).max(1e-300));
    (dt / h).ceil().max(1.0) as usize
}

#[inline]
fn verlet(x: &mut f64, p: &mut f64, h: f64, params: &ModelParams) {
    let v = &params.potential;
    *x += 0.5 * h * *p;
    *p -= h * v.slope(wrap(*x));
    *x += 0.5 * h * *p;
}

#[inline]
fn step(x: &mut f64, p: &mut f64, h: f64, energy: f64, revolving: bool, params: &ModelParams) {
    for w in YOSHIDA {
        verlet(x, p, w * h, params);
    }
    *x = wrap(*x);
    if revolving {
        let kinetic = 2.0 * (energy - params.potential.value(*x));
        *p = p.signum() * kinetic.max(0.0).sqrt();
    }
}

/// Advances `s` by `dt` along the Hamiltonian flow.
pub fn integrate_flow(s: &PhaseState, dt: f64, params: &ModelParams, cfg: &SimConfig) -> Result<PhaseState> {
    integrate_flow_visit(s, dt, params, cfg, |_, _| {})
}

/// As [`integrate_flow`], calling `visit(h, state)` after every step with the
/// step length and the state reached.
pub fn integrate_flow_visit<F: FnMut(f64, &PhaseState)>(
    s: &PhaseState,
    dt: f64,
    params: &ModelParams,
    cfg: &SimConfig,
    mut visit: F,
) -> Result<PhaseState> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("flow time must be finite and >= 0, got {dt}")));
    }
    if dt == 0.0 {
        return Ok(*s);
    }
    if params.potential.is_zero() {
        let out = PhaseState::new(s.x + s.p * dt, s.p);
        visit(dt, &out);
        return Ok(out);
    }
    let energy = hamiltonian(s, &params.potential);
    let n = step_count(s, dt, params, cfg);
    let h = dt / n as f64;
    let revolving = energy > params.potential.sup() * (1.0 + 1e-6) + 1e-9;
    let (mut x, mut p) = (s.x, s.p);
    for _ in 0..n {
        step(&mut x, &mut p, h, energy, revolving, params);
        visit(h, &PhaseState { x, p });
    }
    let out = PhaseState { x: wrap(x), p };
    let drift = (hamiltonian(&out, &params.potential) - energy).abs();
    if drift > cfg.energy_tol * (1.0 + dt) * (1.0 + energy) {
        return Err(Error::StepControl(format!(
            "energy drift {drift:e} over dt = {dt} exceeds tolerance (H = {energy})"
        )));
    }
    Ok(out)
}

/// Period `∮ dx / √(ρ² - 2V(x))` of a revolving orbit at radius `rho`.
pub fn orbit_period(rho: f64, params: &ModelParams) -> Result<f64> {
    let v = &params.potential;
    if rho * rho <= 2.0 * v.sup() {
        return Err(Error::TrappedOrbit { rho });
    }
    v.torus_integral(|x| 1.0 / (rho * rho - 2.0 * v.value(x)).sqrt(), 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Potential;

    fn cosine() -> ModelParams {
        ModelParams::new(0.25, Potential::cosine(1.0).unwrap()).unwrap()
    }

    #[test]
    fn free_motion_examples() {
        let params = ModelParams::new(0.5, Potential::zero()).unwrap();
        let cfg = SimConfig::default();
        let out = integrate_flow(&PhaseState::new(0.2, 3.0), 0.5, &params, &cfg).unwrap();
        assert!((out.x - 0.7).abs() < 1e-12 && out.p == 3.0);
        let out = integrate_flow(&PhaseState::new(0.9, 2.0), 0.1, &params, &cfg).unwrap();
        assert!((out.x - 0.1).abs() < 1e-12 && out.p == 2.0);
    }

    #[test]
    fn revolving_orbit_closes_after_one_period() {
        let params = cosine();
        let t = orbit_period(2.0, &params).unwrap();
        let out = integrate_flow(&PhaseState::new(0.0, 2.0), t, &params, &SimConfig::default()).unwrap();
        let dx = (out.x - 0.0).abs().min((out.x - 1.0).abs());
        assert!(dx < 1e-6 && (out.p - 2.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn trapped_orbit_conserves_energy_and_reverses() {
        let params = cosine();
        let cfg = SimConfig::default();
        for s in [PhaseState::new(0.1, 0.5), PhaseState::new(0.0, 1.3), PhaseState::new(0.3, 2.5)] {
            let dt = 3.7;
            let out = integrate_flow(&s, dt, &params, &cfg).unwrap();
            let h0 = hamiltonian(&s, &params.potential);
            let h1 = hamiltonian(&out, &params.potential);
            assert!((h1 - h0).abs() <= 1e-9 * (1.0 + dt), "{s:?}: {h0} -> {h1}");
            let back = integrate_flow(&PhaseState::new(out.x, -out.p), dt, &params, &cfg).unwrap();
            let dx = (back.x - s.x).abs().min(1.0 - (back.x - s.x).abs());
            assert!(dx < 1e-10 && (back.p + s.p).abs() < 1e-10, "{s:?} -> {back:?}");
        }
    }

    #[test]
    fn energy_drift_stays_within_tolerance() {
        let params = cosine();
        let cfg = SimConfig::default();
        let mut worst: f64 = 0.0;
        for k in 0..400 {
            let x = (k as f64 * 0.618_034).fract();
            let p = -3.0 + 6.0 * (k as f64 * 0.414_214).fract();
            let dt = 0.05 + 4.0 * (k as f64 * 0.732_051).fract();
            let s = PhaseState::new(x, p);
            let out = integrate_flow(&s, dt, &params, &cfg).unwrap();
            let d = (hamiltonian(&out, &params.potential) - hamiltonian(&s, &params.potential)).abs();
            worst = worst.max(d / (1.0 + dt));
        }
        assert!(worst < 1e-9, "{worst:e}");
    }

    #[test]
    fn rejects_negative_time() {
        let params = cosine();
        assert!(integrate_flow(&PhaseState::new(0.0, 1.0), -1.0, &params, &SimConfig::default()).is_err());
        assert!(orbit_period(1.0, &params).is_err());
    }
}
