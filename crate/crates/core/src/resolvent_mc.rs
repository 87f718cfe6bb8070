//! Monte-Carlo estimators of the state-modulated resolvent
//! `U_h(s, f) = E_s ∫_0^∞ f(S_t) e^{-∫_0^t h(S_r) dr} dt`.
//!
//! Four equivalent representations are available:
//!
//! * `killing`: integrate `f` until an independent clock with instantaneous
//!   rate `h` rings,
//! * `exp_weight`: integrate `f` against the weight `e^{-∫h}` directly,
//! * `chain_weights`: sample the path at the times of an independent rate-`ĥ`
//!   Poisson clock and sum `f` with weights `Π (1 - h/ĥ)`, divided by `ĥ`,
//! * `chain_coins`: at the same times flip a coin with head probability
//!   `h/ĥ` and sum `f` up to and including the first head, divided by `ĥ`.
//!
//! Every path owns three random streams derived from the query seed and its
//! index (dynamics, auxiliary clocks, start-point draws), so estimates do not
//! depend on the number of workers and paired queries share randomness.

use crate::error::{Error, Result};
use crate::flow::SimConfig;
use crate::level_curves::{curve_state, hat_map, CurveState};
use crate::model::{ModelParams, Modulator, Payoff, PhaseState, Potential};
use crate::process::{FullEngine, FwEngine, MomentumEngine, Outcome, PathEngine};
use crate::sampling::{RandomStream, REJECTION_CAP};
use crate::stats::{batch_means, BATCHES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Killing,
    ExpWeight,
    ChainWeights,
    ChainCoins,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [Self::Killing, Self::ExpWeight, Self::ChainWeights, Self::ChainCoins];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Killing => "killing",
            Self::ExpWeight => "exp_weight",
            Self::ChainWeights => "chain_weights",
            Self::ChainCoins => "chain_coins",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown estimator '{s}'")))
    }
}

/// Which process drives the paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    /// Flow plus collisions on the cylinder.
    Full,
    /// The pure-jump momentum process; `x` is ignored and `V` treated as zero.
    MomentumOnly,
}

/// Per-path limits. A path that reaches a cap is kept with its partial
/// contribution and flags the estimate as biased.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathCaps {
    pub event_cap: usize,
    pub time_cap: f64,
    /// Paths stop once their discount weight falls below this value.
    pub weight_floor: f64,
}

impl Default for PathCaps {
    fn default() -> Self {
        Self { event_cap: 1_000_000, time_cap: 1e6, weight_floor: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct ResolventQuery {
    pub start: PhaseState,
    pub modulator: Modulator,
    pub payoff: Payoff,
    pub estimator: EstimatorKind,
    pub samples: usize,
    /// Majorant `ĥ ≥ sup h` for the chain representations.
    pub h_hat: f64,
    pub seed: u64,
    pub caps: PathCaps,
    pub process: ProcessKind,
    pub sim: SimConfig,
}

impl ResolventQuery {
    /// Killing estimator on the full process with `ĥ = sup h`.
    pub fn new(start: PhaseState, modulator: Modulator, payoff: Payoff) -> Self {
        let h_hat = modulator.sup();
        Self {
            start,
            modulator,
            payoff,
            estimator: EstimatorKind::Killing,
            samples: 10_000,
            h_hat,
            seed: 0,
            caps: PathCaps::default(),
            process: ProcessKind::Full,
            sim: SimConfig::default(),
        }
    }

    pub fn estimator(mut self, kind: EstimatorKind) -> Self {
        self.estimator = kind;
        self
    }

    pub fn samples(mut self, n: usize) -> Self {
        self.samples = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn process(mut self, process: ProcessKind) -> Self {
        self.process = process;
        self
    }

    pub fn h_hat(mut self, h_hat: f64) -> Self {
        self.h_hat = h_hat;
        self
    }

    pub fn start(mut self, start: PhaseState) -> Self {
        self.start = start;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidParameter("sample count must be >= 1".into()));
        }
        if !(self.h_hat > 0.0) || self.h_hat < self.modulator.sup() {
            return Err(Error::InvalidParameter(format!(
                "majorant {} must be positive and >= sup h = {}",
                self.h_hat,
                self.modulator.sup()
            )));
        }
        if !(self.modulator.sup() > 0.0) {
            return Err(Error::InvalidParameter("modulator must not vanish identically".into()));
        }
        self.sim.validate()
    }
}

/// Result of a Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Batch-means standard error over 32 batches.
    pub stderr: f64,
    pub n: usize,
    /// Set when some path hit a cap or left the reduced domain.
    pub biased: bool,
    /// Bound on the contribution lost by capped or exited paths.
    pub bias_bound: f64,
    pub wall_time: f64,
}

impl Estimate {
    /// Whether `self` and `other` agree within `k` combined standard errors.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * self.stderr.hypot(other.stderr)
    }
}

#[derive(Debug, Clone, Default)]
struct PathOutput {
    values: Vec<f64>,
    truncated: bool,
    exited: bool,
    /// Discount weight left when the path was cut.
    residual: f64,
}

/// Stream ids of path `i`: dynamics, auxiliary clocks, start-point draws.
pub fn path_streams(seed: u64, i: usize) -> (RandomStream, RandomStream, RandomStream) {
    let base = 3 * i as u64;
    (RandomStream::new(seed, base), RandomStream::new(seed, base + 1), RandomStream::new(seed, base + 2))
}

struct PathSpec<'a, S> {
    kind: EstimatorKind,
    payoffs: &'a (dyn Fn(&S, &mut [f64]) + Sync),
    modulator: &'a (dyn Fn(&S) -> f64 + Sync),
    constant_on_pieces: bool,
    h_hat: f64,
    caps: PathCaps,
    m: usize,
}

fn run_path<E: PathEngine>(
    engine: &mut E,
    spec: &PathSpec<'_, E::State>,
    dynamics: &mut RandomStream,
    aux: &mut RandomStream,
) -> Result<PathOutput> {
    match spec.kind {
        EstimatorKind::Killing | EstimatorKind::ExpWeight => run_time_integral(engine, spec, dynamics, aux),
        EstimatorKind::ChainWeights | EstimatorKind::ChainCoins => run_chain(engine, spec, dynamics, aux),
    }
}

fn run_time_integral<E: PathEngine>(
    engine: &mut E,
    spec: &PathSpec<'_, E::State>,
    dynamics: &mut RandomStream,
    aux: &mut RandomStream,
) -> Result<PathOutput> {
    let killing = spec.kind == EstimatorKind::Killing;
    let clock = if killing { aux.exp1() } else { f64::INFINITY };
    let mut out = PathOutput { values: vec![0.0; spec.m], ..Default::default() };
    let mut fa = vec![0.0; spec.m];
    let mut fb = vec![0.0; spec.m];
    let mut favg = vec![0.0; spec.m];
    let (mut area, mut t, mut events) = (0.0f64, 0.0f64, 0usize);
    // returns true once the killing clock has rung
    let segment = |dt: f64, f: &[f64], h: f64, area: &mut f64, values: &mut [f64]| -> bool {
        if killing {
            if *area + h * dt >= clock {
                let tau = (clock - *area) / h;
                values.iter_mut().zip(f).for_each(|(v, fv)| *v += fv * tau);
                *area = clock;
                return true;
            }
            values.iter_mut().zip(f).for_each(|(v, fv)| *v += fv * dt);
        } else {
            let w = (-*area).exp();
            let g = if h * dt > 1e-12 { w * (1.0 - (-h * dt).exp()) / h } else { w * dt };
            values.iter_mut().zip(f).for_each(|(v, fv)| *v += fv * g);
        }
        *area += h * dt;
        false
    };
    loop {
        if !killing && (-area).exp() < spec.caps.weight_floor {
            out.residual = (-area).exp();
            break;
        }
        if events >= spec.caps.event_cap || t >= spec.caps.time_cap {
            out.truncated = true;
            out.residual = if killing { 1.0 } else { (-area).exp() };
            break;
        }
        let piece = engine.advance(dynamics)?;
        events += 1;
        let mut done = false;
        if spec.constant_on_pieces {
            (spec.payoffs)(&piece.start, &mut fa);
            let h = (spec.modulator)(&piece.start);
            done = segment(piece.duration, &fa, h, &mut area, &mut out.values);
        } else {
            (spec.payoffs)(&piece.start, &mut fa);
            let mut ha = (spec.modulator)(&piece.start);
            for (dt, s) in engine.substeps(&piece, piece.duration)? {
                (spec.payoffs)(&s, &mut fb);
                let hb = (spec.modulator)(&s);
                favg.iter_mut().zip(fa.iter().zip(&fb)).for_each(|(m, (a, b))| *m = 0.5 * (a + b));
                if segment(dt, &favg, 0.5 * (ha + hb), &mut area, &mut out.values) {
                    done = true;
                    break;
                }
                std::mem::swap(&mut fa, &mut fb);
                ha = hb;
            }
        }
        if done {
            break;
        }
        t += piece.duration;
        if matches!(piece.outcome, Outcome::Exit(_)) {
            out.exited = true;
            out.residual = if killing { 1.0 } else { (-area).exp() };
            break;
        }
    }
    Ok(out)
}

fn run_chain<E: PathEngine>(
    engine: &mut E,
    spec: &PathSpec<'_, E::State>,
    dynamics: &mut RandomStream,
    aux: &mut RandomStream,
) -> Result<PathOutput> {
    let coins = spec.kind == EstimatorKind::ChainCoins;
    let mut out = PathOutput { values: vec![0.0; spec.m], ..Default::default() };
    let mut fv = vec![0.0; spec.m];
    let mut weight = 1.0;
    let mut next = aux.exp1() / spec.h_hat;
    let (mut t, mut events) = (0.0f64, 0usize);
    'path: loop {
        if events >= spec.caps.event_cap || t >= spec.caps.time_cap {
            out.truncated = true;
            out.residual = weight;
            break;
        }
        let piece = engine.advance(dynamics)?;
        events += 1;
        while next < t + piece.duration {
            let s = if engine.moves_between_events() { engine.state_within(&piece, next - t)? } else { piece.start };
            (spec.payoffs)(&s, &mut fv);
            let h = (spec.modulator)(&s);
            out.values.iter_mut().zip(&fv).for_each(|(v, f)| *v += weight * f);
            if coins {
                if aux.uniform() * spec.h_hat < h {
                    break 'path;
                }
            } else {
                weight *= 1.0 - h / spec.h_hat;
                if weight < spec.caps.weight_floor {
                    out.residual = weight;
                    break 'path;
                }
            }
            next += aux.exp1() / spec.h_hat;
        }
        t += piece.duration;
        if matches!(piece.outcome, Outcome::Exit(_)) {
            out.exited = true;
            out.residual = weight;
            break;
        }
    }
    out.values.iter_mut().for_each(|v| *v /= spec.h_hat);
    Ok(out)
}

fn summarize(outputs: &[PathOutput], m: usize, sups: &[f64], h_floor: f64, started: Instant) -> Vec<Estimate> {
    let n = outputs.len();
    let biased = outputs.iter().any(|o| o.truncated || o.exited);
    let residual = outputs.iter().filter(|o| o.truncated || o.exited).map(|o| o.residual).sum::<f64>() / n as f64;
    let wall_time = started.elapsed().as_secs_f64();
    (0..m)
        .map(|k| {
            let column: Vec<f64> = outputs.iter().map(|o| o.values[k]).collect();
            let (mean, stderr) = batch_means(&column, BATCHES);
            // a cut path misses at most sup f times the time it would still
            // survive, which a modulator bounded below by `h_floor` caps at 1/h_floor
            let bias_bound = if biased { sups[k] * residual / h_floor.max(1e-300) } else { 0.0 };
            Estimate { mean, stderr, n, biased, bias_bound, wall_time }
        })
        .collect()
}

fn full_constant(params: &ModelParams, modulator: &Modulator, payoffs: &[Payoff]) -> bool {
    let plain = |custom: bool| params.potential.is_zero() && !custom;
    (modulator.is_energy_function() || plain(matches!(modulator, Modulator::Custom { .. })))
        && payoffs.iter().all(|f| f.is_energy_function() || plain(matches!(f, Payoff::Custom { .. })))
}

/// Estimates `U_h(s, f_k)` for every payoff on the same set of paths.
pub fn estimate_payoffs(q: &ResolventQuery, payoffs: &[Payoff], params: &ModelParams) -> Result<Vec<Estimate>> {
    q.validate()?;
    let started = Instant::now();
    let m = payoffs.len();
    let sups: Vec<f64> = payoffs.iter().map(Payoff::sup).collect();
    let h_floor = match &q.modulator {
        Modulator::Constant(c) => *c,
        _ => 0.0,
    };
    let outputs: Vec<PathOutput> = match q.process {
        ProcessKind::Full => {
            let v = &params.potential;
            let f = |s: &PhaseState, out: &mut [f64]| {
                out.iter_mut().zip(payoffs).for_each(|(o, p)| *o = p.eval(s, v));
            };
            let h = |s: &PhaseState| q.modulator.eval(s, v);
            let spec = PathSpec {
                kind: q.estimator,
                payoffs: &f,
                modulator: &h,
                constant_on_pieces: full_constant(params, &q.modulator, payoffs),
                h_hat: q.h_hat,
                caps: q.caps,
                m,
            };
            (0..q.samples)
                .into_par_iter()
                .map(|i| {
                    let (mut dy, mut aux, _) = path_streams(q.seed, i);
                    let mut engine = FullEngine::new(q.start, params, q.sim);
                    run_path(&mut engine, &spec, &mut dy, &mut aux)
                })
                .collect::<Result<_>>()?
        }
        ProcessKind::MomentumOnly => {
            let flat = Potential::zero();
            let f = |p: &f64, out: &mut [f64]| {
                let s = PhaseState { x: 0.0, p: *p };
                out.iter_mut().zip(payoffs).for_each(|(o, pf)| *o = pf.eval(&s, &flat));
            };
            let h = |p: &f64| q.modulator.eval(&PhaseState { x: 0.0, p: *p }, &flat);
            let spec = PathSpec {
                kind: q.estimator,
                payoffs: &f,
                modulator: &h,
                constant_on_pieces: true,
                h_hat: q.h_hat,
                caps: q.caps,
                m,
            };
            (0..q.samples)
                .into_par_iter()
                .map(|i| {
                    let (mut dy, mut aux, _) = path_streams(q.seed, i);
                    let mut engine = MomentumEngine::new(q.start.p, params.lambda);
                    run_path(&mut engine, &spec, &mut dy, &mut aux)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(summarize(&outputs, m, &sups, h_floor, started))
}

/// Estimate with the query's own estimator.
pub fn estimate(q: &ResolventQuery, params: &ModelParams) -> Result<Estimate> {
    Ok(estimate_payoffs(q, std::slice::from_ref(&q.payoff), params)?[0])
}

pub fn estimate_killing(q: &ResolventQuery, params: &ModelParams) -> Result<Estimate> {
    estimate(&q.clone().estimator(EstimatorKind::Killing), params)
}

pub fn estimate_exp_weight(q: &ResolventQuery, params: &ModelParams) -> Result<Estimate> {
    estimate(&q.clone().estimator(EstimatorKind::ExpWeight), params)
}

pub fn estimate_chain_weights(q: &ResolventQuery, params: &ModelParams) -> Result<Estimate> {
    estimate(&q.clone().estimator(EstimatorKind::ChainWeights), params)
}

pub fn estimate_chain_coins(q: &ResolventQuery, params: &ModelParams) -> Result<Estimate> {
    estimate(&q.clone().estimator(EstimatorKind::ChainCoins), params)
}

/// Draws a state from the orbit measure of the revolving component `gamma`.
pub fn sample_on_orbit(gamma: &CurveState, params: &ModelParams, stream: &mut RandomStream) -> Result<PhaseState> {
    let v = &params.potential;
    let sign = if gamma.eps < 0 { -1.0 } else { 1.0 };
    if v.is_zero() {
        return Ok(PhaseState::new(stream.uniform(), sign * gamma.rho));
    }
    let r2 = gamma.rho * gamma.rho;
    if r2 <= 2.0 * v.sup() {
        return Err(Error::TrappedOrbit { rho: gamma.rho });
    }
    let slowest = (r2 - 2.0 * v.sup()).sqrt();
    for _ in 0..REJECTION_CAP {
        let x = stream.uniform();
        let speed = (r2 - 2.0 * v.value(x)).sqrt();
        if stream.uniform() * speed < slowest {
            return Ok(PhaseState::new(x, sign * speed));
        }
    }
    Err(Error::RejectionCap(REJECTION_CAP))
}

/// Averages the query's estimator over starting states drawn by `draw` from
/// the start stream of each path; the dynamics and clock streams are those
/// of a point estimate with the same seed.
pub fn estimate_random_start<D>(
    q: &ResolventQuery,
    draw: D,
    payoffs: &[Payoff],
    params: &ModelParams,
) -> Result<Vec<Estimate>>
where
    D: Fn(&mut RandomStream) -> Result<PhaseState> + Sync,
{
    q.validate()?;
    let started = Instant::now();
    let v = &params.potential;
    let m = payoffs.len();
    let sups: Vec<f64> = payoffs.iter().map(Payoff::sup).collect();
    let f = |s: &PhaseState, out: &mut [f64]| {
        out.iter_mut().zip(payoffs).for_each(|(o, p)| *o = p.eval(s, v));
    };
    let h = |s: &PhaseState| q.modulator.eval(s, v);
    let spec = PathSpec {
        kind: q.estimator,
        payoffs: &f,
        modulator: &h,
        constant_on_pieces: full_constant(params, &q.modulator, payoffs),
        h_hat: q.h_hat,
        caps: q.caps,
        m,
    };
    let outputs: Vec<PathOutput> = (0..q.samples)
        .into_par_iter()
        .map(|i| {
            let (mut dy, mut aux, mut st) = path_streams(q.seed, i);
            let s0 = draw(&mut st)?;
            let mut engine = FullEngine::new(s0, params, q.sim);
            run_path(&mut engine, &spec, &mut dy, &mut aux)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&outputs, m, &sups, 0.0, started))
}

/// `Û(γ, f)`: the resolvent averaged over starts drawn from the orbit
/// measure of `gamma`.
pub fn estimate_hat_resolvent(
    gamma: &CurveState,
    q: &ResolventQuery,
    payoffs: &[Payoff],
    params: &ModelParams,
) -> Result<Vec<Estimate>> {
    estimate_random_start(q, |st| sample_on_orbit(gamma, params, st), payoffs, params)
}

/// `U(s, f)`, `Û(γ(s), f)` and their difference, from paired paths: path
/// `i` of both estimates shares its dynamics and clock streams, so the
/// difference has far smaller variance than either estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedEstimate {
    pub point: Estimate,
    pub hat: Estimate,
    pub diff: Estimate,
}

pub fn estimate_homogenization_gap(
    q: &ResolventQuery,
    payoffs: &[Payoff],
    params: &ModelParams,
) -> Result<Vec<PairedEstimate>> {
    q.validate()?;
    let started = Instant::now();
    let gamma = curve_state(&q.start, params)?;
    let v = &params.potential;
    let m = payoffs.len();
    let sups: Vec<f64> = payoffs.iter().map(Payoff::sup).collect();
    let f = |s: &PhaseState, out: &mut [f64]| {
        out.iter_mut().zip(payoffs).for_each(|(o, p)| *o = p.eval(s, v));
    };
    let h = |s: &PhaseState| q.modulator.eval(s, v);
    let spec = PathSpec {
        kind: q.estimator,
        payoffs: &f,
        modulator: &h,
        constant_on_pieces: full_constant(params, &q.modulator, payoffs),
        h_hat: q.h_hat,
        caps: q.caps,
        m,
    };
    let pairs: Vec<(PathOutput, PathOutput)> = (0..q.samples)
        .into_par_iter()
        .map(|i| {
            let (dy, aux, mut st) = path_streams(q.seed, i);
            let s0 = sample_on_orbit(&gamma, params, &mut st)?;
            let mut engine = FullEngine::new(q.start, params, q.sim);
            let a = run_path(&mut engine, &spec, &mut dy.clone(), &mut aux.clone())?;
            let mut engine = FullEngine::new(s0, params, q.sim);
            let b = run_path(&mut engine, &spec, &mut dy.clone(), &mut aux.clone())?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let (points, hats): (Vec<PathOutput>, Vec<PathOutput>) = pairs.into_iter().unzip();
    let diffs: Vec<PathOutput> = points
        .iter()
        .zip(&hats)
        .map(|(a, b)| PathOutput {
            values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(),
            truncated: a.truncated || b.truncated,
            exited: a.exited || b.exited,
            residual: a.residual + b.residual,
        })
        .collect();
    let point = summarize(&points, m, &sups, 0.0, started);
    let hat = summarize(&hats, m, &sups, 0.0, started);
    let diff = summarize(&diffs, m, &sups, 0.0, started);
    Ok((0..m).map(|k| PairedEstimate { point: point[k], hat: hat[k], diff: diff[k] }).collect())
}

/// Query for the homogenized process with killing rate `χ(ρ ≤ kill_radius)`.
#[derive(Debug, Clone)]
pub struct FwQuery {
    pub start: CurveState,
    pub payoff: Payoff,
    pub kill_radius: f64,
    pub samples: usize,
    pub seed: u64,
    pub caps: PathCaps,
}

impl FwQuery {
    /// Killing below `√(2l)`.
    pub fn new(start: CurveState, payoff: Payoff, params: &ModelParams) -> Self {
        Self {
            start,
            payoff,
            kill_radius: (2.0 * params.l).sqrt(),
            samples: 10_000,
            seed: 0,
            caps: PathCaps::default(),
        }
    }
}

/// Killing estimator of `Ū(γ, f̂)` on the homogenized process. Paths that
/// leave the reduced domain keep their pre-exit integral; the estimate is
/// then flagged and `bias_bound` reports `sup f` times the exit fraction,
/// the expected remaining payoff if killing at unit rate took over.
pub fn estimate_fw_resolvent(q: &FwQuery, params: &ModelParams) -> Result<Estimate> {
    if q.samples == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    FwEngine::new(q.start, params)?;
    let started = Instant::now();
    let payoff = &q.payoff;
    let fail = std::sync::Mutex::new(None);
    let f = |g: &CurveState, out: &mut [f64]| {
        out[0] = match hat_map(payoff, g, params) {
            Ok(v) => v,
            Err(e) => {
                fail.lock().expect("poisoned").get_or_insert(e);
                0.0
            }
        };
    };
    let radius = q.kill_radius;
    let h = |g: &CurveState| if g.rho <= radius { 1.0 } else { 0.0 };
    let spec = PathSpec {
        kind: EstimatorKind::Killing,
        payoffs: &f,
        modulator: &h,
        constant_on_pieces: true,
        h_hat: 1.0,
        caps: q.caps,
        m: 1,
    };
    let outputs: Vec<PathOutput> = (0..q.samples)
        .into_par_iter()
        .map(|i| {
            let (mut dy, mut aux, _) = path_streams(q.seed, i);
            let mut engine = FwEngine::new(q.start, params)?;
            run_path(&mut engine, &spec, &mut dy, &mut aux)
        })
        .collect::<Result<_>>()?;
    if let Some(e) = fail.into_inner().expect("poisoned") {
        return Err(e);
    }
    Ok(summarize(&outputs, 1, &[payoff.sup()], 1.0, started)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(lambda: f64) -> ModelParams {
        ModelParams::new(lambda, Potential::zero()).unwrap()
    }

    #[test]
    fn zero_payoff_gives_zero() {
        let params = flat(0.5);
        let q =
            ResolventQuery::new(PhaseState::new(0.0, 2.0), Modulator::standard(&params), Payoff::zero()).samples(200);
        for k in EstimatorKind::ALL {
            let e = estimate(&q.clone().estimator(k), &params).unwrap();
            assert_eq!(e.mean, 0.0, "{k}");
        }
    }

    #[test]
    fn constant_modulator_calibration() {
        let params = ModelParams::new(0.5, Potential::cosine(1.0).unwrap()).unwrap();
        let q =
            ResolventQuery::new(PhaseState::new(0.1, 1.0), Modulator::Constant(2.0), Payoff::Constant(1.0)).samples(64);
        for k in [EstimatorKind::ChainWeights, EstimatorKind::ChainCoins, EstimatorKind::ExpWeight] {
            let e = estimate(&q.clone().estimator(k), &params).unwrap();
            assert!((e.mean - 0.5).abs() < 1e-9, "{k}: {}", e.mean);
        }
        let e = estimate_killing(&q.clone().samples(4000), &params).unwrap();
        assert!((e.mean - 0.5).abs() < 3.0 * e.stderr + 1e-12, "{e:?}");
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let params = flat(0.5);
        let q = ResolventQuery::new(
            PhaseState::new(0.0, 2.0),
            Modulator::standard(&params),
            Payoff::IndicatorBand { lo: 1.0, hi: 3.0 },
        )
        .samples(300)
        .seed(11);
        let one =
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| estimate(&q, &params).unwrap());
        let four =
            rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| estimate(&q, &params).unwrap());
        assert_eq!(one.mean.to_bits(), four.mean.to_bits());
        assert_eq!(one.stderr.to_bits(), four.stderr.to_bits());
    }

    #[test]
    fn rejects_bad_majorant() {
        let params = flat(0.5);
        let q =
            ResolventQuery::new(PhaseState::new(0.0, 2.0), Modulator::Constant(2.0), Payoff::Constant(1.0)).h_hat(1.0);
        assert!(estimate(&q, &params).is_err());
        assert!(estimate(&q.clone().h_hat(2.0).samples(0), &params).is_err());
    }
}
