//! Closed-loop evaluation against the simulator or a surrogate model, with
//! action-latency injection, binned start positions and inference timing.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{net_forward, step_features, TransitionEnsemble};
use crate::error::{config, Result};
use crate::exec::Execution;
use crate::policy::{FeatureVector, VqcPolicy};
use crate::world::{physics_step_dt, reward, PhysicalState, Termination, WorldConfig};

/// Anything that maps features to an action.
pub trait Controller: Sync {
    fn act(&self, features: &FeatureVector) -> Result<f64>;
}

impl Controller for VqcPolicy {
    fn act(&self, features: &FeatureVector) -> Result<f64> {
        VqcPolicy::act(self, features)
    }
}

/// `a = clamp(k·[p, ṗ, θ, θ̇], −1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearController {
    pub gains: [f64; 4],
}

impl Default for LinearController {
    fn default() -> Self {
        Self {
            gains: [1.0, 1.2, 7.8, 1.9],
        }
    }
}

impl Controller for LinearController {
    fn act(&self, f: &FeatureVector) -> Result<f64> {
        let x = [f.p, f.p_dot, f.theta(), f.theta_dot];
        let a: f64 = self.gains.iter().zip(&x).map(|(k, v)| k * v).sum();
        Ok(a.clamp(-1.0, 1.0))
    }
}

/// Delay between a state being observed and its action reaching the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub fixed_delay_ms: f64,
    /// Half-width of uniform jitter added to the delay.
    pub jitter_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            fixed_delay_ms: 0.0,
            jitter_ms: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn fixed(ms: f64) -> Self {
        Self {
            fixed_delay_ms: ms,
            jitter_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fixed_delay_ms.is_finite() || !self.jitter_ms.is_finite() {
            return config("latency must be finite");
        }
        if self.fixed_delay_ms < 0.0
            || self.jitter_ms < 0.0
            || self.fixed_delay_ms - self.jitter_ms < 0.0
        {
            return config(format!(
                "latency {} ± {} ms can go negative",
                self.fixed_delay_ms, self.jitter_ms
            ));
        }
        Ok(())
    }
}

/// Source of the compute time charged to each action.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Wall-clock time of the controller call.
    #[default]
    Measured,
    /// Fixed compute time; makes episodes reproducible bit for bit.
    Modeled { compute_ms: f64 },
}

impl Timing {
    fn call(self, controller: &dyn Controller, f: &FeatureVector) -> Result<(f64, f64)> {
        match self {
            Timing::Measured => {
                let start = Instant::now();
                let a = controller.act(f)?;
                Ok((a, start.elapsed().as_secs_f64() * 1e3))
            }
            Timing::Modeled { compute_ms } => Ok((controller.act(f)?, compute_ms.max(0.0))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub latency: LatencyModel,
    pub timing: Timing,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            latency: LatencyModel::default(),
            timing: Timing::Measured,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub state: PhysicalState,
    pub features: FeatureVector,
    /// Action in effect at the end of the control period.
    pub action: f64,
    /// Reward of the state reached after this step.
    pub reward: f64,
    pub inference_ms: f64,
    /// Tick whose state produced `action`; `None` while no action has arrived.
    pub applied_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    /// State reached after the last recorded step.
    pub final_state: PhysicalState,
    pub steps_balanced: usize,
    pub termination: Termination,
}

pub const TRACE_HEADER: [&str; 8] = [
    "t",
    "p",
    "p_dot",
    "theta",
    "theta_dot",
    "action",
    "reward",
    "inference_ms",
];

impl EpisodeTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRACE_HEADER)?;
        for s in &self.steps {
            w.write_record([
                s.t.to_string(),
                s.state.p.to_string(),
                s.state.p_dot.to_string(),
                s.state.theta.to_string(),
                s.state.theta_dot.to_string(),
                s.action.to_string(),
                s.reward.to_string(),
                s.inference_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Pending {
    arrival: f64,
    action: f64,
    from: usize,
}

/// Runs the controller on the simulator from `start`.
///
/// Each tick observes the state, computes an action and schedules it to
/// arrive after compute time plus the injected delay. Between arrivals the
/// plant keeps the last delivered action, zero before the first one. Only an
/// action newer than the one in effect replaces it.
pub fn run_episode(
    controller: &dyn Controller,
    world: &WorldConfig,
    start: PhysicalState,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeTrace> {
    world.validate()?;
    cfg.latency.validate()?;
    if !start.is_finite() || world.termination(&start).is_some() {
        return config(format!("start state {start:?} is outside the valid region"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = start;
    let mut history = [0.0; 3];
    let mut current = (0.0, None::<usize>);
    let mut pending: Vec<Pending> = Vec::new();
    let mut steps = Vec::with_capacity(cfg.max_steps);
    let mut termination = Termination::MaxSteps;

    for t in 0..cfg.max_steps {
        let features = FeatureVector::from_physical(&state, history);
        let (action, compute_ms) = cfg.timing.call(controller, &features)?;
        let jitter = if cfg.latency.jitter_ms > 0.0 {
            rng.gen_range(-cfg.latency.jitter_ms..=cfg.latency.jitter_ms)
        } else {
            0.0
        };
        let delay_ms = (compute_ms + cfg.latency.fixed_delay_ms + jitter).max(0.0);
        let t0 = t as f64 * world.dt;
        let t1 = (t + 1) as f64 * world.dt;
        pending.push(Pending {
            arrival: t0 + delay_ms * 1e-3,
            action,
            from: t,
        });

        let mut clock = t0;
        let mut next = state;
        loop {
            // earliest arrival inside [clock, t1)
            let due = pending
                .iter()
                .enumerate()
                .filter(|(_, p)| p.arrival < t1)
                .min_by(|a, b| {
                    a.1.arrival
                        .total_cmp(&b.1.arrival)
                        .then(a.1.from.cmp(&b.1.from))
                });
            let Some((i, _)) = due else { break };
            let p = pending.swap_remove(i);
            let at = p.arrival.max(clock);
            if at > clock {
                next = physics_step_dt(&next, current.0, world, at - clock)?;
                clock = at;
            }
            if current.1.is_none_or(|f| p.from > f) {
                current = (p.action, Some(p.from));
            }
        }
        if t1 > clock {
            next = physics_step_dt(&next, current.0, world, t1 - clock)?;
        }

        let applied = current.0.clamp(-1.0, 1.0);
        steps.push(TraceStep {
            t,
            state,
            features,
            action: applied,
            reward: reward(world, next.p, next.theta, next.theta_dot),
            inference_ms: compute_ms,
            applied_from: current.1,
        });
        history = [history[1], history[2], applied];
        state = next;
        if let Some(cause) = world.termination(&state) {
            termination = cause;
            break;
        }
    }
    let steps_balanced = if termination == Termination::MaxSteps {
        steps.len()
    } else {
        steps.len() - 1
    };
    Ok(EpisodeTrace {
        steps,
        final_state: state,
        steps_balanced,
        termination,
    })
}

/// Which ensemble member drives a surrogate episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberSelection {
    Fixed(usize),
    /// Member `t mod K` at step `t`.
    RoundRobin,
}

/// Rolls the controller through the ensemble without gradients.
pub fn surrogate_episode(
    controller: &dyn Controller,
    ensemble: &TransitionEnsemble,
    world: &WorldConfig,
    s0: FeatureVector,
    members: MemberSelection,
    max_steps: usize,
    timing: Timing,
) -> Result<EpisodeTrace> {
    if ensemble.is_empty() {
        return config("empty ensemble");
    }
    if let MemberSelection::Fixed(k) = members {
        if k >= ensemble.len() {
            return config(format!("member {k} outside ensemble of {}", ensemble.len()));
        }
    }
    if !s0.is_finite() {
        return config("non-finite start features");
    }
    let fails = |s: &FeatureVector| {
        if s.theta().abs() > world.fail_angle {
            Some(Termination::PoleFell)
        } else if s.p.abs() > world.track_limit {
            Some(Termination::TrackExceeded)
        } else {
            None
        }
    };
    let mut s = s0;
    let mut steps = Vec::with_capacity(max_steps);
    let mut termination = Termination::MaxSteps;
    for t in 0..max_steps {
        let (a, inference_ms) = timing.call(controller, &s)?;
        let model = match members {
            MemberSelection::Fixed(k) => &ensemble.models[k],
            MemberSelection::RoundRobin => &ensemble.models[t % ensemble.len()],
        };
        let next = step_features(&s, a, &net_forward(model, &s, a)?)?;
        let phys = next.to_physical();
        steps.push(TraceStep {
            t,
            state: s.to_physical(),
            features: s,
            action: a,
            reward: reward(world, phys.p, phys.theta, phys.theta_dot),
            inference_ms,
            applied_from: Some(t),
        });
        s = next;
        if let Some(cause) = fails(&s) {
            termination = cause;
            break;
        }
    }
    let steps_balanced = if termination == Termination::MaxSteps {
        steps.len()
    } else {
        steps.len() - 1
    };
    Ok(EpisodeTrace {
        steps,
        final_state: s.to_physical(),
        steps_balanced,
        termination,
    })
}

/// `n` resting starts at the track center with tilts spread evenly over
/// `[−max_theta, max_theta]` and an empty action history.
pub fn centered_starts(n: usize, max_theta: f64) -> Vec<FeatureVector> {
    (0..n)
        .map(|i| {
            let theta = if n > 1 {
                -max_theta + 2.0 * max_theta * i as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let state = PhysicalState {
                p: 0.0,
                p_dot: 0.0,
                theta,
                theta_dot: 0.0,
            };
            FeatureVector::from_physical(&state, [0.0; 3])
        })
        .collect()
}

/// One surrogate episode per start; start `i` of `n` runs on member
/// `i·K/n`, so starts use distinct members whenever `K ≥ n`.
pub fn surrogate_sweep(
    controller: &dyn Controller,
    ensemble: &TransitionEnsemble,
    world: &WorldConfig,
    starts: &[FeatureVector],
    max_steps: usize,
    timing: Timing,
    exec: Execution,
) -> Result<Vec<EpisodeTrace>> {
    let k = ensemble.len();
    let n = starts.len().max(1);
    exec.map_range(starts.len(), |i| {
        let member = MemberSelection::Fixed(i * k / n % k.max(1));
        surrogate_episode(
            controller, ensemble, world, starts[i], member, max_steps, timing,
        )
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinsConfig {
    pub bin_width: f64,
    pub runs_per_bin: usize,
    /// Largest initial |θ| in radians.
    pub max_theta0: f64,
    pub episode: EpisodeConfig,
}

impl Default for BinsConfig {
    fn default() -> Self {
        Self {
            bin_width: 0.8,
            runs_per_bin: 10,
            max_theta0: 3f64.to_radians(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl BinsConfig {
    /// Bin edges tiling `[−track_limit, track_limit]`.
    pub fn edges(&self, world: &WorldConfig) -> Result<Vec<(f64, f64)>> {
        let span = 2.0 * world.track_limit;
        if !self.bin_width.is_finite() || self.bin_width <= 0.0 {
            return config(format!("bin width {} must be positive", self.bin_width));
        }
        let n = (span / self.bin_width).round();
        if n < 1.0 || (n * self.bin_width - span).abs() > 1e-9 * span {
            return config(format!(
                "bin width {} does not divide track span {span}",
                self.bin_width
            ));
        }
        if self.runs_per_bin == 0 {
            return config("runs_per_bin must be at least 1");
        }
        let n = n as usize;
        Ok((0..n)
            .map(|i| {
                let lo = -world.track_limit + i as f64 * self.bin_width;
                let hi = if i + 1 == n {
                    world.track_limit
                } else {
                    lo + self.bin_width
                };
                (lo, hi)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub start: f64,
    pub end: f64,
    pub steps: Vec<usize>,
    pub mean_steps: f64,
    pub min_steps: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: Vec<BinStats>,
}

pub const BINS_HEADER: [&str; 5] = [
    "bin_start",
    "bin_end",
    "mean_steps",
    "min_steps",
    "max_steps",
];

impl BinReport {
    /// Bins lying within the inner half of the track.
    pub fn center_bins(&self, track_limit: f64) -> Vec<&BinStats> {
        let half = track_limit / 2.0 + 1e-12;
        self.bins
            .iter()
            .filter(|b| b.start >= -half && b.end <= half)
            .collect()
    }

    /// Outermost bin on each side.
    pub fn edge_bins(&self) -> Vec<&BinStats> {
        match self.bins.len() {
            0 => Vec::new(),
            1 => vec![&self.bins[0]],
            n => vec![&self.bins[0], &self.bins[n - 1]],
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(BINS_HEADER)?;
        for b in &self.bins {
            w.write_record([
                b.start.to_string(),
                b.end.to_string(),
                b.mean_steps.to_string(),
                b.min_steps.to_string(),
                b.max_steps.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `runs_per_bin` episodes per start-position bin.
pub fn binned_evaluation(
    controller: &dyn Controller,
    world: &WorldConfig,
    bins: &BinsConfig,
    seed: u64,
    exec: Execution,
) -> Result<BinReport> {
    let edges = bins.edges(world)?;
    let runs = bins.runs_per_bin;
    let results = exec.map_range(edges.len() * runs, |i| {
        let (lo, hi) = edges[i / runs];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let p = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let theta = if bins.max_theta0 > 0.0 {
            rng.gen_range(-bins.max_theta0..=bins.max_theta0)
        } else {
            0.0
        };
        let start = PhysicalState {
            p,
            p_dot: 0.0,
            theta,
            theta_dot: 0.0,
        };
        run_episode(controller, world, start, &bins.episode, rng.gen())
            .map(|trace| trace.steps_balanced)
    });
    let mut steps = Vec::with_capacity(results.len());
    for r in results {
        steps.push(r?);
    }
    let bins = edges
        .iter()
        .zip(steps.chunks(runs))
        .map(|(&(start, end), s)| BinStats {
            start,
            end,
            steps: s.to_vec(),
            mean_steps: s.iter().sum::<usize>() as f64 / s.len() as f64,
            min_steps: *s.iter().min().expect("runs ≥ 1"),
            max_steps: *s.iter().max().expect("runs ≥ 1"),
        })
        .collect();
    Ok(BinReport { bins })
}

pub const MIN_TRIALS: usize = 100;

/// Per-call latency in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub p99: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((0.99 * sorted.len() as f64).ceil() as usize).saturating_sub(1);
        let p99 = sorted.get(idx).copied().unwrap_or(0.0);
        Self {
            samples,
            mean,
            std,
            p99,
        }
    }
}

/// Times `n_trials` controller calls on random features after `warmup`
/// discarded calls. Runs on the calling thread.
pub fn bench_inference(
    controller: &dyn Controller,
    n_trials: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyStats> {
    if n_trials < MIN_TRIALS {
        return config(format!("n_trials {n_trials} below minimum {MIN_TRIALS}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_features = |rng: &mut ChaCha8Rng| {
        let state = PhysicalState {
            p: rng.gen_range(-2.4..=2.4),
            p_dot: rng.gen_range(-3.0..=3.0),
            theta: rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI),
            theta_dot: rng.gen_range(-6.0..=6.0),
        };
        FeatureVector::from_physical(
            &state,
            [
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            ],
        )
    };
    for _ in 0..warmup {
        let f = random_features(&mut rng);
        controller.act(&f)?;
    }
    let mut samples = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let f = random_features(&mut rng);
        let start = Instant::now();
        std::hint::black_box(controller.act(std::hint::black_box(&f))?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(samples))
}
