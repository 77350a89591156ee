//! Simulated annealing over the lookahead policy's window `W` and migration
//! ratio `R`.
//!
//! The objective `T(W, R)` is the total decode latency of a full lookahead
//! simulation. Proposals perturb `W` by ±1/±2, `R` by ±`r_step`, or both;
//! uphill moves are accepted with probability `exp(-ΔT / C)` and the
//! temperature decays geometrically.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{SimError, ValidationError};
use crate::memory_model::MemoryConfig;
use crate::policies::PolicyKind;
use crate::simulator::simulate;
use crate::trace::DecodeTrace;

const CALIBRATION_SAMPLES: usize = 30;
const WINDOW_DELTAS: [i64; 4] = [-2, -1, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    /// Target initial acceptance ratio of uphill moves.
    pub p0: f64,
    /// Cooling rate.
    pub alpha: f64,
    /// Stop when the best cost improves by less than this fraction over a
    /// temperature level.
    pub improve_threshold: f64,
    /// Absolute temperature cutoff; `None` means `1e-4 * C0`.
    pub temp_min: Option<f64>,
    pub iters_per_temp: u32,
    pub max_iters: u32,
    pub w_min: u32,
    pub w_max: u32,
    pub r_step: f64,
    pub start: Params,
    /// Set by the experiment seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            p0: 0.8,
            alpha: 0.9,
            improve_threshold: 0.001,
            temp_min: None,
            iters_per_temp: 20,
            max_iters: 2000,
            w_min: 1,
            w_max: 64,
            r_step: 0.1,
            start: Params { window: 8, ratio: 0.5 },
            seed: 0,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ValidationError::new("sa.alpha", "must be in (0, 1)"));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(ValidationError::new("sa.p0", "must be in (0, 1)"));
        }
        if self.improve_threshold.is_nan() || self.improve_threshold < 0.0 {
            return Err(ValidationError::new("sa.improve_threshold", "must be >= 0"));
        }
        if let Some(t) = self.temp_min {
            if t.is_nan() || t <= 0.0 {
                return Err(ValidationError::new("sa.temp_min", "must be > 0"));
            }
        }
        if self.w_min == 0 || self.w_min > self.w_max {
            return Err(ValidationError::new("sa.w_min", "need 1 <= w_min <= w_max"));
        }
        if !(self.r_step > 0.0 && self.r_step <= 1.0) {
            return Err(ValidationError::new("sa.r_step", "must be in (0, 1]"));
        }
        if self.iters_per_temp == 0 {
            return Err(ValidationError::new("sa.iters_per_temp", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.start.ratio) {
            return Err(ValidationError::new("sa.start.ratio", "must be in [0, 1]"));
        }
        if !(self.w_min..=self.w_max).contains(&self.start.window) {
            return Err(ValidationError::new("sa.start.window", "must lie in [w_min, w_max]"));
        }
        Ok(())
    }
}

/// A point in the search space.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub window: u32,
    pub ratio: f64,
}

impl Params {
    pub fn policy(&self) -> PolicyKind {
        PolicyKind::Lookahead {
            window: self.window,
            ratio: self.ratio,
        }
    }

    fn key(&self) -> (u32, u64) {
        (self.window, (self.ratio * 1e9).round() as u64)
    }
}

/// Snaps accumulated ratio steps back onto a 1e-9 grid.
fn tidy_ratio(r: f64) -> f64 {
    ((r.clamp(0.0, 1.0)) * 1e9).round() / 1e9
}

/// Memoized objective `T(W, R)`.
pub struct Evaluator<'a> {
    trace: &'a DecodeTrace,
    cfg: &'a MemoryConfig,
    memo: HashMap<(u32, u64), f64>,
    simulations: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(trace: &'a DecodeTrace, cfg: &'a MemoryConfig) -> Self {
        Self {
            trace,
            cfg,
            memo: HashMap::new(),
            simulations: 0,
        }
    }

    pub fn evaluate(&mut self, p: Params) -> Result<f64, SimError> {
        if let Some(&t) = self.memo.get(&p.key()) {
            return Ok(t);
        }
        let t = simulate(self.trace, self.cfg, p.policy())?.total_latency;
        self.simulations += 1;
        self.memo.insert(p.key(), t);
        Ok(t)
    }

    /// Number of distinct points actually simulated.
    pub fn simulations(&self) -> usize {
        self.simulations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Window,
    Ratio,
    Diagonal,
}

/// Draws a neighbour of `current`: a window move (p = 0.4), a ratio move
/// (p = 0.4) or one of each (p = 0.2). Results are clamped to the bounds.
pub fn propose<R: Rng>(rng: &mut R, current: Params, cfg: &SaConfig) -> (Params, MoveKind) {
    let u: f64 = rng.gen();
    let kind = if u < 0.4 {
        MoveKind::Window
    } else if u < 0.8 {
        MoveKind::Ratio
    } else {
        MoveKind::Diagonal
    };
    let mut next = current;
    if matches!(kind, MoveKind::Window | MoveKind::Diagonal) {
        let delta = WINDOW_DELTAS[rng.gen_range(0..WINDOW_DELTAS.len())];
        let w = (current.window as i64 + delta).clamp(cfg.w_min as i64, cfg.w_max as i64);
        next.window = w as u32;
    }
    if matches!(kind, MoveKind::Ratio | MoveKind::Diagonal) {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        next.ratio = tidy_ratio(current.ratio + sign * cfg.r_step);
    }
    (next, kind)
}

/// Metropolis acceptance probability.
pub fn acceptance_probability(delta: f64, temperature: f64) -> f64 {
    if delta <= 0.0 {
        1.0
    } else if temperature <= 0.0 {
        0.0
    } else {
        (-delta / temperature).exp()
    }
}

/// Returns the decision and the uniform draw it was based on.
pub fn accept<R: Rng>(delta: f64, temperature: f64, rng: &mut R) -> (bool, f64) {
    let draw: f64 = rng.gen();
    (draw < acceptance_probability(delta, temperature), draw)
}

/// `mean(uphill) / -ln(p0)`, or `0.01 * fallback_cost` without uphill samples.
pub fn initial_temperature(uphill: &[f64], p0: f64, fallback_cost: f64) -> f64 {
    if uphill.is_empty() {
        return 0.01 * fallback_cost;
    }
    let mean = uphill.iter().sum::<f64>() / uphill.len() as f64;
    mean / -p0.ln()
}

/// Samples neighbours of `start` and sizes `C0` so that an average uphill
/// move is accepted with probability `p0`.
pub fn calibrate_initial_temperature<R: Rng>(
    eval: &mut Evaluator<'_>,
    start: Params,
    cfg: &SaConfig,
    rng: &mut R,
) -> Result<f64, SimError> {
    let base = eval.evaluate(start)?;
    let mut uphill = Vec::new();
    for _ in 0..CALIBRATION_SAMPLES {
        let (p, _) = propose(rng, start, cfg);
        let delta = eval.evaluate(p)? - base;
        if delta > 0.0 {
            uphill.push(delta);
        }
    }
    Ok(initial_temperature(&uphill, cfg.p0, base))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: u32,
    pub level: u32,
    pub temperature: f64,
    pub window: u32,
    pub ratio: f64,
    pub cost: f64,
    pub accepted: bool,
    pub draw: f64,
    pub best_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Best cost improved by less than the threshold over a level.
    Converged,
    /// Temperature fell below the cutoff.
    Frozen,
    /// Proposal budget exhausted.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaOutcome {
    pub best: Params,
    pub best_cost: f64,
    pub start_cost: f64,
    pub initial_temperature: f64,
    pub termination: Termination,
    pub log: Vec<LogEntry>,
    pub simulations: usize,
}

pub fn run_sa(trace: &DecodeTrace, cfg: &MemoryConfig, sa: &SaConfig) -> Result<SaOutcome, SimError> {
    sa.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sa.seed);
    let mut eval = Evaluator::new(trace, cfg);

    let start = Params {
        window: sa.start.window.clamp(sa.w_min, sa.w_max),
        ratio: tidy_ratio(sa.start.ratio),
    };
    let start_cost = eval.evaluate(start)?;
    let c0 = calibrate_initial_temperature(&mut eval, start, sa, &mut rng)?;
    let temp_min = sa.temp_min.unwrap_or(c0 * 1e-4);

    let (mut current, mut current_cost) = (start, start_cost);
    let (mut best, mut best_cost) = (start, start_cost);
    let mut temperature = c0;
    let mut log = Vec::new();
    let mut iter = 0u32;
    let mut level = 0u32;

    let termination = 'search: loop {
        let level_best = best_cost;
        for _ in 0..sa.iters_per_temp {
            if iter >= sa.max_iters {
                break 'search Termination::Budget;
            }
            let (candidate, _) = propose(&mut rng, current, sa);
            let cost = eval.evaluate(candidate)?;
            let (accepted, draw) = accept(cost - current_cost, temperature, &mut rng);
            if accepted {
                current = candidate;
                current_cost = cost;
                if cost < best_cost {
                    best = candidate;
                    best_cost = cost;
                }
            }
            log.push(LogEntry {
                iter,
                level,
                temperature,
                window: candidate.window,
                ratio: candidate.ratio,
                cost,
                accepted,
                draw,
                best_cost,
            });
            iter += 1;
        }
        temperature *= sa.alpha;
        level += 1;
        if (level_best - best_cost) / level_best < sa.improve_threshold {
            break Termination::Converged;
        }
        if temperature < temp_min {
            break Termination::Frozen;
        }
    };

    Ok(SaOutcome {
        best,
        best_cost,
        start_cost,
        initial_temperature: c0,
        termination,
        log,
        simulations: eval.simulations(),
    })
}

pub fn write_log_csv<W: Write>(log: &[LogEntry], mut dest: W) -> std::io::Result<()> {
    writeln!(dest, "iter,level,temperature,W,R,T_seconds,accepted,uniform_draw")?;
    for e in log {
        writeln!(
            dest,
            "{},{},{},{},{},{},{},{}",
            e.iter, e.level, e.temperature, e.window, e.ratio, e.cost, e.accepted, e.draw
        )?;
    }
    dest.flush()
}
