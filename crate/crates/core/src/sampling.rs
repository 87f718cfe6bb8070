//! Exact samplers for collision outcomes and collision times, and the
//! reproducible random-stream contract.

use crate::error::{Error, Result};
use crate::model::{escape_rate, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use std::f64::consts::PI;

/// Iteration cap of the rejection loop. Reaching it indicates a broken
/// generator, not bad luck.
pub const REJECTION_CAP: usize = 1_000_000;

/// A counter-based random stream keyed by `(seed, stream_id)`. Equal keys give
/// identical draw sequences regardless of which worker owns the stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Unit-rate exponential.
    #[inline]
    pub fn exp1(&mut self) -> f64 {
        self.rng.sample(Exp1)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `true` with probability `prob`.
    #[inline]
    pub fn bernoulli(&mut self, prob: f64) -> bool {
        self.uniform() < prob
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Draws `p'` from `J_λ(p, ·) / E_λ(p)`.
///
/// In the variable `u = ((1+λ)p' - (1-λ)p)/2` the target is proportional to
/// `|a - u| e^{-u²/2}` with `a = λp`. Proposals come from the envelope
/// `(|a| + |u|) e^{-u²/2}`, a mixture of a scaled Gaussian and a two-sided
/// Rayleigh law, and are accepted with probability `|a-u| / (|a|+|u|)`.
pub fn sample_post_collision(lambda: f64, p: f64, stream: &mut RandomStream) -> Result<f64> {
    let a = lambda * p;
    let gauss_mass = a.abs() * (2.0 * PI).sqrt();
    let gauss_share = gauss_mass / (gauss_mass + 2.0);
    for _ in 0..REJECTION_CAP {
        let u = if stream.uniform() < gauss_share {
            stream.normal()
        } else {
            let r = (2.0 * stream.exp1()).sqrt();
            if stream.uniform() < 0.5 {
                -r
            } else {
                r
            }
        };
        let bound = a.abs() + u.abs();
        let target = (a - u).abs();
        debug_assert!(target <= bound * (1.0 + 1e-15));
        if stream.uniform() * bound < target {
            return Ok(momentum_from_offset(lambda, p, u));
        }
    }
    Err(Error::RejectionCap(REJECTION_CAP))
}

/// `p' = (2u + (1-λ)p)/(1+λ)`, the inverse of the sampler's substitution.
#[inline]
pub fn momentum_from_offset(lambda: f64, p: f64, u: f64) -> f64 {
    (2.0 * u + (1.0 - lambda) * p) / (1.0 + lambda)
}

/// `u = ((1+λ)p' - (1-λ)p)/2`.
#[inline]
pub fn offset_from_momentum(lambda: f64, p: f64, p_new: f64) -> f64 {
    0.5 * ((1.0 + lambda) * p_new - (1.0 - lambda) * p)
}

/// Acceptance probability of [`sample_post_collision`] at `a = λp`.
pub fn post_collision_efficiency(a: f64) -> f64 {
    let a = a.abs();
    let target = 2.0 * (-0.5 * a * a).exp() + a * (2.0 * PI).sqrt() * crate::quad::centered_normal_mass(a);
    target / (a * (2.0 * PI).sqrt() + 2.0)
}

/// Relative energy margin added to the shell before taking its majorant, so
/// that integrator drift along the shell never lifts the rate above it.
pub const SHELL_SLACK: f64 = 1e-8;

/// Thinning clock for collisions along one energy shell.
///
/// Candidates arrive at the constant rate `E' = E_λ(√(2(H - inf V)))`, the
/// largest escape rate met on the shell since `E_λ` increases with `|p|` and
/// `|p|` peaks where `V` is smallest. A candidate at momentum `p` is a real
/// collision with probability `E_λ(p)/E'`, otherwise it is vacuous.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellClock {
    pub lambda: f64,
    pub energy: f64,
    pub majorant: f64,
}

impl ShellClock {
    pub fn new(energy: f64, params: &ModelParams) -> Self {
        let v = &params.potential;
        let top = if v.is_zero() { energy } else { energy + SHELL_SLACK * (1.0 + energy.abs()) };
        let pmax = (2.0 * (top - v.inf()).max(0.0)).sqrt();
        Self { lambda: params.lambda, energy, majorant: escape_rate(params.lambda, pmax) }
    }

    /// Waiting time to the next candidate.
    #[inline]
    pub fn next_candidate(&self, stream: &mut RandomStream) -> f64 {
        stream.exp1() / self.majorant
    }

    /// Accept/reject a candidate at momentum `p`.
    pub fn accept(&self, p: f64, stream: &mut RandomStream) -> Result<bool> {
        let rate = escape_rate(self.lambda, p);
        if rate > self.majorant * (1.0 + 1e-12) {
            return Err(Error::MajorantViolation { majorant: self.majorant, rate });
        }
        Ok(stream.uniform() * self.majorant < rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::jump_kernel;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RandomStream::new(7, 3);
        let mut b = RandomStream::new(7, 3);
        let mut c = RandomStream::new(7, 4);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn substitution_maps_kernel_to_envelope_target() {
        let mut s = RandomStream::new(1, 0);
        for _ in 0..1000 {
            let lambda = s.uniform();
            let p = 20.0 * (s.uniform() - 0.5);
            let a = lambda * p;
            let mut ratio: Option<f64> = None;
            for _ in 0..5 {
                let u = 6.0 * (s.uniform() - 0.5);
                let q = momentum_from_offset(lambda, p, u);
                assert!((offset_from_momentum(lambda, p, q) - u).abs() < 1e-12);
                assert!(((p - q) - 2.0 * (a - u) / (1.0 + lambda)).abs() < 1e-12);
                let target = (a - u).abs() * (-0.5 * u * u).exp();
                if target < 1e-12 {
                    continue;
                }
                let r = jump_kernel(lambda, p, q) * (2.0 / (1.0 + lambda)) / (2.0 * target);
                if let Some(r0) = ratio {
                    assert!(((r - r0) / r0).abs() < 1e-10);
                }
                ratio = Some(r);
            }
        }
    }

    #[test]
    fn sampler_efficiency_is_bounded_below() {
        let min = (0..4000).map(|k| post_collision_efficiency(k as f64 * 0.005)).fold(1.0, f64::min);
        assert!(min > 0.6, "{min}");
        assert!((post_collision_efficiency(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampler_handles_zero_lambda() {
        let mut s = RandomStream::new(2, 0);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| sample_post_collision(0.0, 3.0, &mut s).unwrap() - 3.0).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn flat_shell_accepts_every_candidate() {
        let params = ModelParams::new(0.3, crate::model::Potential::zero()).unwrap();
        let clock = ShellClock::new(0.5 * 4.0, &params);
        let mut s = RandomStream::new(3, 0);
        assert!((0..1000).all(|_| clock.accept(2.0, &mut s).unwrap()));
        assert!(clock.accept(2.5, &mut s).is_err());
    }
}
