//! Trajectories of the full process on the cylinder, the momentum-only jump
//! process, and the homogenized jump process on level-curve components.
//!
//! All three are driven through [`PathEngine`], which yields the path one
//! piece at a time: a deterministic stretch followed by a collision, a
//! vacuous candidate, or an exit from the reduced domain.

use crate::error::{Error, Result};
use crate::flow::{integrate_flow, integrate_flow_visit, SimConfig};
use crate::level_curves::{curve_state, reduced_floor, CurveState};
use crate::model::{escape_rate, hamiltonian, ModelParams, PhaseState};
use crate::sampling::{sample_post_collision, RandomStream, ShellClock, REJECTION_CAP};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Collision,
    Vacuous,
    BoundarySample,
    ReducedDomainExit,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Collision => "collision",
            Self::Vacuous => "vacuous",
            Self::BoundarySample => "boundary_sample",
            Self::ReducedDomainExit => "reduced_domain_exit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEvent<S> {
    pub time: f64,
    pub kind: EventKind,
    pub before: S,
    pub after: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub start: S,
    pub events: Vec<TrajectoryEvent<S>>,
    /// Set when a cap stopped the path before the horizon.
    pub truncated: bool,
    /// Set when the path left the reduced domain before the horizon.
    pub exited: bool,
}

impl<S: Copy> Trajectory<S> {
    /// The start followed by the post-event states.
    pub fn states(&self) -> Vec<S> {
        std::iter::once(self.start).chain(self.events.iter().map(|e| e.after)).collect()
    }

    pub fn last(&self) -> S {
        self.events.last().map_or(self.start, |e| e.after)
    }

    pub fn collisions(&self) -> impl Iterator<Item = &TrajectoryEvent<S>> {
        self.events.iter().filter(|e| e.kind == EventKind::Collision)
    }
}

/// How a piece ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome<S> {
    Collision(S),
    Vacuous,
    /// The jump left the reduced domain; the payload is the landing state.
    Exit(S),
}

/// A deterministic stretch of a path followed by an event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece<S> {
    pub start: S,
    pub duration: f64,
    pub end: S,
    pub outcome: Outcome<S>,
}

impl<S: Copy> Piece<S> {
    /// State right after the closing event.
    pub fn next_state(&self) -> S {
        match self.outcome {
            Outcome::Collision(s) => s,
            Outcome::Vacuous | Outcome::Exit(_) => self.end,
        }
    }
}

/// A path generator that can be stepped piece by piece.
pub trait PathEngine {
    type State: Copy + fmt::Debug;

    fn current(&self) -> Self::State;

    /// Generates the next piece and moves to the state after its event.
    fn advance(&mut self, stream: &mut RandomStream) -> Result<Piece<Self::State>>;

    /// State `offset` time units into `piece`.
    fn state_within(&self, piece: &Piece<Self::State>, offset: f64) -> Result<Self::State>;

    /// Whether the state changes between events.
    fn moves_between_events(&self) -> bool;

    /// Sub-steps of the first `until` time units of `piece` as
    /// `(length, state at the end of the sub-step)`.
    fn substeps(&self, piece: &Piece<Self::State>, until: f64) -> Result<Vec<(f64, Self::State)>>;
}

/// Flow plus thinned collisions on the cylinder.
#[derive(Debug, Clone)]
pub struct FullEngine<'a> {
    params: &'a ModelParams,
    cfg: SimConfig,
    state: PhaseState,
    clock: ShellClock,
}

impl<'a> FullEngine<'a> {
    pub fn new(s0: PhaseState, params: &'a ModelParams, cfg: SimConfig) -> Self {
        let clock = ShellClock::new(hamiltonian(&s0, &params.potential), params);
        Self { params, cfg, state: s0, clock }
    }

    pub fn clock(&self) -> &ShellClock {
        &self.clock
    }
}

impl PathEngine for FullEngine<'_> {
    type State = PhaseState;

    fn current(&self) -> PhaseState {
        self.state
    }

    fn advance(&mut self, stream: &mut RandomStream) -> Result<Piece<PhaseState>> {
        let wait = self.clock.next_candidate(stream);
        let start = self.state;
        let end = integrate_flow(&start, wait, self.params, &self.cfg)?;
        let outcome = if self.clock.accept(end.p, stream)? {
            let p_new = sample_post_collision(self.params.lambda, end.p, stream)?;
            let after = PhaseState { x: end.x, p: p_new };
            self.clock = ShellClock::new(hamiltonian(&after, &self.params.potential), self.params);
            Outcome::Collision(after)
        } else {
            Outcome::Vacuous
        };
        let piece = Piece { start, duration: wait, end, outcome };
        self.state = piece.next_state();
        Ok(piece)
    }

    fn state_within(&self, piece: &Piece<PhaseState>, offset: f64) -> Result<PhaseState> {
        integrate_flow(&piece.start, offset, self.params, &self.cfg)
    }

    fn moves_between_events(&self) -> bool {
        true
    }

    fn substeps(&self, piece: &Piece<PhaseState>, until: f64) -> Result<Vec<(f64, PhaseState)>> {
        let mut out = Vec::new();
        if self.params.potential.is_zero() {
            let n = (until / self.cfg.max_step).ceil().max(1.0) as usize;
            let h = until / n as f64;
            for k in 1..=n {
                out.push((h, PhaseState::new(piece.start.x + piece.start.p * h * k as f64, piece.start.p)));
            }
            return Ok(out);
        }
        integrate_flow_visit(&piece.start, until, self.params, &self.cfg, |h, s| out.push((h, *s)))?;
        Ok(out)
    }
}

/// Pure-jump momentum process: waits at rate `E_λ(p)`, jumps by the
/// collision kernel.
#[derive(Debug, Clone)]
pub struct MomentumEngine {
    lambda: f64,
    p: f64,
}

impl MomentumEngine {
    pub fn new(p0: f64, lambda: f64) -> Self {
        Self { lambda, p: p0 }
    }
}

impl PathEngine for MomentumEngine {
    type State = f64;

    fn current(&self) -> f64 {
        self.p
    }

    fn advance(&mut self, stream: &mut RandomStream) -> Result<Piece<f64>> {
        let wait = stream.exp1() / escape_rate(self.lambda, self.p);
        let p_new = sample_post_collision(self.lambda, self.p, stream)?;
        let piece = Piece { start: self.p, duration: wait, end: self.p, outcome: Outcome::Collision(p_new) };
        self.p = p_new;
        Ok(piece)
    }

    fn state_within(&self, piece: &Piece<f64>, _offset: f64) -> Result<f64> {
        Ok(piece.start)
    }

    fn moves_between_events(&self) -> bool {
        false
    }

    fn substeps(&self, piece: &Piece<f64>, until: f64) -> Result<Vec<(f64, f64)>> {
        Ok(vec![(until, piece.start)])
    }
}

/// The homogenized jump process on revolving components.
///
/// Candidates arrive at `E' = E_λ(√(ρ² - 2 inf V))`. The collision point is
/// drawn from `κ_γ` by rejection from the uniform law on the torus, the
/// candidate is kept with probability `E_λ(p(x))/E'`, and the new component
/// is `G_V(x, p')` with `p'` from the collision kernel. Landing at or below
/// the reduced-domain floor ends the path with an exit.
#[derive(Debug, Clone)]
pub struct FwEngine<'a> {
    params: &'a ModelParams,
    gamma: CurveState,
    majorant: f64,
    floor: f64,
    exited: bool,
}

impl<'a> FwEngine<'a> {
    pub fn new(gamma0: CurveState, params: &'a ModelParams) -> Result<Self> {
        let floor = reduced_floor(&params.potential);
        if !params.potential.is_zero() && gamma0.rho <= floor {
            return Err(Error::TwoBranch { rho: gamma0.rho, threshold: floor });
        }
        let mut e = Self { params, gamma: gamma0, majorant: 0.0, floor, exited: false };
        e.refresh();
        Ok(e)
    }

    fn refresh(&mut self) {
        let v = &self.params.potential;
        let pmax = (self.gamma.rho * self.gamma.rho - 2.0 * v.inf()).max(0.0).sqrt();
        self.majorant = escape_rate(self.params.lambda, pmax);
    }

    pub fn majorant(&self) -> f64 {
        self.majorant
    }
}

impl PathEngine for FwEngine<'_> {
    type State = CurveState;

    fn current(&self) -> CurveState {
        self.gamma
    }

    fn advance(&mut self, stream: &mut RandomStream) -> Result<Piece<CurveState>> {
        if self.exited {
            return Err(Error::InvalidParameter("path already left the reduced domain".into()));
        }
        let lambda = self.params.lambda;
        let v = &self.params.potential;
        let wait = stream.exp1() / self.majorant;
        let start = self.gamma;
        let sign = if start.eps < 0 { -1.0 } else { 1.0 };
        let r2 = start.rho * start.rho;
        let (x, p) = if v.is_zero() {
            (0.0, sign * start.rho)
        } else {
            let slowest = (r2 - 2.0 * v.sup()).sqrt();
            let mut found = None;
            for _ in 0..REJECTION_CAP {
                let x = stream.uniform();
                let speed = (r2 - 2.0 * v.value(x)).sqrt();
                if stream.uniform() * speed < slowest {
                    found = Some((x, sign * speed));
                    break;
                }
            }
            let (x, p) = found.ok_or(Error::RejectionCap(REJECTION_CAP))?;
            let rate = escape_rate(lambda, p);
            if rate > self.majorant * (1.0 + 1e-12) {
                return Err(Error::MajorantViolation { majorant: self.majorant, rate });
            }
            if stream.uniform() * self.majorant >= rate {
                return Ok(Piece { start, duration: wait, end: start, outcome: Outcome::Vacuous });
            }
            (x, p)
        };
        let p_new = sample_post_collision(lambda, p, stream)?;
        let rho_new = (p_new * p_new + 2.0 * v.value(x)).sqrt();
        let landing = CurveState::new(rho_new, if p_new < 0.0 { -1 } else { 1 });
        let outcome = if !v.is_zero() && rho_new <= self.floor {
            self.exited = true;
            Outcome::Exit(landing)
        } else {
            self.gamma = landing;
            self.refresh();
            Outcome::Collision(landing)
        };
        Ok(Piece { start, duration: wait, end: start, outcome })
    }

    fn state_within(&self, piece: &Piece<CurveState>, _offset: f64) -> Result<CurveState> {
        Ok(piece.start)
    }

    fn moves_between_events(&self) -> bool {
        false
    }

    fn substeps(&self, piece: &Piece<CurveState>, until: f64) -> Result<Vec<(f64, CurveState)>> {
        Ok(vec![(until, piece.start)])
    }
}

/// Runs `engine` up to `horizon`, recording every event and a closing
/// boundary sample at the horizon.
pub fn run_engine<E: PathEngine>(
    engine: &mut E,
    horizon: f64,
    cfg: &SimConfig,
    stream: &mut RandomStream,
) -> Result<Trajectory<E::State>> {
    if !(horizon >= 0.0) {
        return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {horizon}")));
    }
    let start = engine.current();
    let mut traj = Trajectory { start, events: Vec::new(), truncated: false, exited: false };
    let mut t = 0.0;
    while t < horizon {
        if traj.events.len() >= cfg.event_cap || t >= cfg.time_cap {
            traj.truncated = true;
            break;
        }
        let piece = engine.advance(stream)?;
        if t + piece.duration >= horizon {
            let s = engine.state_within(&piece, horizon - t)?;
            traj.events.push(TrajectoryEvent { time: horizon, kind: EventKind::BoundarySample, before: s, after: s });
            break;
        }
        t += piece.duration;
        let (kind, after) = match piece.outcome {
            Outcome::Collision(s) => (EventKind::Collision, s),
            Outcome::Vacuous => (EventKind::Vacuous, piece.end),
            Outcome::Exit(s) => (EventKind::ReducedDomainExit, s),
        };
        traj.events.push(TrajectoryEvent { time: t, kind, before: piece.end, after });
        if kind == EventKind::ReducedDomainExit {
            traj.exited = true;
            break;
        }
    }
    Ok(traj)
}

/// Full process from `s0` up to `horizon`.
pub fn simulate_full(
    s0: PhaseState,
    horizon: f64,
    params: &ModelParams,
    cfg: &SimConfig,
    stream: &mut RandomStream,
) -> Result<Trajectory<PhaseState>> {
    cfg.validate()?;
    run_engine(&mut FullEngine::new(s0, params, *cfg), horizon, cfg, stream)
}

/// Momentum-only process from `p0` up to `horizon`.
pub fn simulate_momentum_only(
    p0: f64,
    horizon: f64,
    lambda: f64,
    stream: &mut RandomStream,
) -> Result<Trajectory<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    run_engine(&mut MomentumEngine::new(p0, lambda), horizon, &SimConfig::default(), stream)
}

/// Homogenized process from `gamma0` up to `horizon`.
pub fn simulate_fw(
    gamma0: CurveState,
    horizon: f64,
    params: &ModelParams,
    cfg: &SimConfig,
    stream: &mut RandomStream,
) -> Result<Trajectory<CurveState>> {
    cfg.validate()?;
    run_engine(&mut FwEngine::new(gamma0, params)?, horizon, cfg, stream)
}

/// Lifts a phase-space start to its component, for the homogenized process.
pub fn fw_start(s: &PhaseState, params: &ModelParams) -> Result<CurveState> {
    curve_state(s, params)
}
