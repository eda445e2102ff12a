//! Cart-pole ground truth: physics, reward, offline dataset generation,
//! cleaning and CSV I/O.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, data, numeric, Result};
use crate::exec::Execution;
use crate::policy::FeatureVector;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let a = theta.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhysicalState {
    pub p: f64,
    pub p_dot: f64,
    /// Pole angle from upright, `(−π, π]`.
    pub theta: f64,
    pub theta_dot: f64,
}

impl PhysicalState {
    pub fn is_finite(&self) -> bool {
        self.p.is_finite()
            && self.p_dot.is_finite()
            && self.theta.is_finite()
            && self.theta_dot.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub angular_weight: f64,
    /// Angular velocity scale in rad/s.
    pub angular_ref: f64,
    /// The angular-velocity penalty applies only while `|θ|` is at most this.
    pub gate_angle: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            angular_weight: 0.1,
            angular_ref: TAU,
            gate_angle: 15f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub gravity: f64,
    /// Newtons per unit action.
    pub force_scale: f64,
    /// Control period in seconds.
    pub dt: f64,
    pub track_limit: f64,
    pub fail_angle: f64,
    pub reward: RewardConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.8,
            force_scale: 10.0,
            dt: 0.02,
            track_limit: 2.4,
            fail_angle: 30f64.to_radians(),
            reward: RewardConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_half_length", self.pole_half_length),
            ("gravity", self.gravity),
            ("force_scale", self.force_scale),
            ("dt", self.dt),
            ("track_limit", self.track_limit),
            ("fail_angle", self.fail_angle),
            ("reward.angular_ref", self.reward.angular_ref),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return config(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.001..=0.1).contains(&self.dt) {
            return config(format!("dt {} outside [0.001, 0.1]", self.dt));
        }
        Ok(())
    }

    /// Pole fell or cart left the track.
    pub fn termination(&self, state: &PhysicalState) -> Option<Termination> {
        if state.theta.abs() > self.fail_angle {
            Some(Termination::PoleFell)
        } else if state.p.abs() > self.track_limit {
            Some(Termination::TrackExceeded)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    PoleFell,
    TrackExceeded,
    MaxSteps,
}

/// One control period of frictionless cart-pole dynamics.
pub fn physics_step(
    state: &PhysicalState,
    action: f64,
    config: &WorldConfig,
) -> Result<PhysicalState> {
    physics_step_dt(state, action, config, config.dt)
}

/// Semi-implicit Euler step of length `h`. The action is clamped to `[−1, 1]`.
pub fn physics_step_dt(
    state: &PhysicalState,
    action: f64,
    config: &WorldConfig,
    h: f64,
) -> Result<PhysicalState> {
    if !state.is_finite() || !action.is_finite() || !h.is_finite() {
        return numeric(format!(
            "non-finite physics input {state:?}, action {action}, h {h}"
        ));
    }
    let (theta_acc, p_acc) = accelerations(state, action, config);
    let p_dot = state.p_dot + h * p_acc;
    let theta_dot = state.theta_dot + h * theta_acc;
    let next = PhysicalState {
        p: state.p + h * p_dot,
        p_dot,
        theta: wrap_angle(state.theta + h * theta_dot),
        theta_dot,
    };
    if !next.is_finite() {
        return numeric("physics step produced non-finite state");
    }
    Ok(next)
}

fn accelerations(s: &PhysicalState, action: f64, c: &WorldConfig) -> (f64, f64) {
    let force = c.force_scale * action.clamp(-1.0, 1.0);
    let total = c.cart_mass + c.pole_mass;
    let ml = c.pole_mass * c.pole_half_length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + ml * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (c.gravity * sin - cos * temp)
        / (c.pole_half_length * (4.0 / 3.0 - c.pole_mass * cos * cos / total));
    let p_acc = temp - ml * theta_acc * cos / total;
    (theta_acc, p_acc)
}

/// Kinetic plus potential energy of cart and uniform pole.
pub fn mechanical_energy(s: &PhysicalState, c: &WorldConfig) -> f64 {
    let m = c.pole_mass;
    let l = c.pole_half_length;
    let kinetic = 0.5 * (c.cart_mass + m) * s.p_dot * s.p_dot
        + m * l * s.p_dot * s.theta_dot * s.theta.cos()
        + (2.0 / 3.0) * m * l * l * s.theta_dot * s.theta_dot;
    kinetic + m * c.gravity * l * s.theta.cos()
}

/// `−[(p/L)² + (θ/π)² + c_ω (θ̇/ω_ref)² 𝟙(|θ| ≤ gate)]`, always ≤ 0.
pub fn reward(config: &WorldConfig, p: f64, theta: f64, theta_dot: f64) -> f64 {
    let r = &config.reward;
    let pos = p / config.track_limit;
    let ang = theta / PI;
    let mut cost = pos * pos + ang * ang;
    if theta.abs() <= r.gate_angle {
        let w = theta_dot / r.angular_ref;
        cost += r.angular_weight * w * w;
    }
    -cost
}

/// Almost-everywhere gradient of [`reward`] w.r.t. `(p, θ, θ̇)`.
pub fn reward_grad(config: &WorldConfig, p: f64, theta: f64, theta_dot: f64) -> [f64; 3] {
    let r = &config.reward;
    let l = config.track_limit;
    let d_p = -2.0 * p / (l * l);
    let d_theta = -2.0 * theta / (PI * PI);
    let d_omega = if theta.abs() <= r.gate_angle {
        -2.0 * r.angular_weight * theta_dot / (r.angular_ref * r.angular_ref)
    } else {
        0.0
    };
    [d_p, d_theta, d_omega]
}

/// Reward of a state in feature space, with `θ = atan2(sin, cos)`.
pub fn feature_reward(config: &WorldConfig, s: &FeatureVector) -> f64 {
    reward(config, s.p, s.theta(), s.theta_dot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: usize,
    pub p: f64,
    pub p_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub action: f64,
    /// Reward of the state reached after `action`.
    pub reward: f64,
    /// Last record of its episode.
    pub done: bool,
}

impl Record {
    pub fn state(&self) -> PhysicalState {
        PhysicalState {
            p: self.p,
            p_dot: self.p_dot,
            theta: self.theta,
            theta_dot: self.theta_dot,
        }
    }

    fn is_finite(&self) -> bool {
        self.state().is_finite() && self.action.is_finite() && self.reward.is_finite()
    }
}

/// One transition `(s_t, a_t, s_{t+1})` in feature space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSample {
    pub s: FeatureVector,
    pub a: f64,
    pub s_next: FeatureVector,
}

pub const CSV_HEADER: [&str; 8] = [
    "t",
    "p",
    "p_dot",
    "theta",
    "theta_dot",
    "action",
    "reward",
    "done",
];

/// Time-ordered offline records; episodes end at `done` flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn episode_count(&self) -> usize {
        let closed = self.records.iter().filter(|r| r.done).count();
        let open_tail = self.records.last().is_some_and(|r| !r.done);
        closed + usize::from(open_tail)
    }

    /// Index ranges of the episodes.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, r) in self.records.iter().enumerate() {
            if r.done {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.records.len() {
            out.push(start..self.records.len());
        }
        out
    }

    /// Every in-episode transition. Action history before an episode's first
    /// record is taken as zero.
    pub fn transitions(&self) -> Vec<TransitionSample> {
        let mut out = Vec::with_capacity(self.records.len());
        for ep in self.episodes() {
            let recs = &self.records[ep];
            for i in 0..recs.len().saturating_sub(1) {
                let hist = |k: usize| if i >= k { recs[i - k].action } else { 0.0 };
                let s = FeatureVector::from_physical(&recs[i].state(), [hist(3), hist(2), hist(1)]);
                let s_next = FeatureVector::from_physical(
                    &recs[i + 1].state(),
                    [hist(2), hist(1), recs[i].action],
                );
                out.push(TransitionSample {
                    s,
                    a: recs[i].action,
                    s_next,
                });
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.p.to_string(),
                r.p_dot.to_string(),
                r.theta.to_string(),
                r.theta_dot.to_string(),
                r.action.to_string(),
                r.reward.to_string(),
                if r.done { "1" } else { "0" }.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return data(format!("unexpected dataset header {header:?}"));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .or_else(|_| data(format!("row {}: bad number {:?}", line + 2, &row[i])))
            };
            let t = row[0]
                .parse::<usize>()
                .or_else(|_| data(format!("row {}: bad step {:?}", line + 2, &row[0])))?;
            let done = match &row[7] {
                "0" => false,
                "1" => true,
                other => return data(format!("row {}: bad done flag {other:?}", line + 2)),
            };
            records.push(Record {
                t,
                p: num(1)?,
                p_dot: num(2)?,
                theta: num(3)?,
                theta_dot: num(4)?,
                action: num(5)?,
                reward: num(6)?,
                done,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

/// Stochastic behavior policy and start distribution for data collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorSpec {
    /// Probability of a uniform-random action at each step.
    pub random_fraction: f64,
    /// Proportional gains on `(p, ṗ, θ, θ̇)`.
    pub gains: [f64; 4],
    /// Per-episode multiplier on `gains`, drawn uniformly from this range.
    pub gain_scale: (f64, f64),
    /// Std of Gaussian noise added to controller actions.
    pub action_noise: f64,
    pub max_steps: usize,
    /// Uniform start ranges (half-widths) for `p`, `ṗ`, `θ`, `θ̇`.
    pub start_ranges: [f64; 4],
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        Self {
            random_fraction: 0.3,
            gains: [1.0, 1.2, 7.8, 1.9],
            gain_scale: (0.2, 1.0),
            action_noise: 0.3,
            max_steps: 500,
            start_ranges: [1.5, 0.2, 0.1, 0.2],
        }
    }
}

impl BehaviorSpec {
    pub fn pure_random() -> Self {
        Self {
            random_fraction: 1.0,
            ..Self::default()
        }
    }
}

fn proportional(gains: &[f64; 4], scale: f64, s: &PhysicalState) -> f64 {
    scale * (gains[0] * s.p + gains[1] * s.p_dot + gains[2] * s.theta + gains[3] * s.theta_dot)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box–Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Runs `episodes` behavior episodes. Each episode draws from its own
/// ChaCha stream so the result does not depend on the execution strategy.
pub fn generate_dataset(
    config: &WorldConfig,
    behavior: &BehaviorSpec,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Dataset> {
    config.validate()?;
    if episodes == 0 {
        return config_err("episodes must be at least 1");
    }
    if behavior.max_steps == 0 {
        return config_err("behavior.max_steps must be at least 1");
    }
    let per_episode = exec.map_range(episodes, |ep| {
        run_behavior_episode(config, behavior, seed, ep as u64)
    });
    let mut records = Vec::new();
    for ep in per_episode {
        records.extend(ep?);
    }
    Ok(Dataset { records })
}

fn config_err<T>(msg: &str) -> Result<T> {
    config(msg)
}

fn run_behavior_episode(
    config: &WorldConfig,
    behavior: &BehaviorSpec,
    seed: u64,
    episode: u64,
) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    let r = behavior.start_ranges;
    let sym = |h: f64, rng: &mut ChaCha8Rng| if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
    let mut state = PhysicalState {
        p: sym(r[0], &mut rng),
        p_dot: sym(r[1], &mut rng),
        theta: sym(r[2], &mut rng),
        theta_dot: sym(r[3], &mut rng),
    };
    let (lo, hi) = behavior.gain_scale;
    let scale = if hi > lo { rng.gen_range(lo..hi) } else { lo };

    let mut out = Vec::with_capacity(behavior.max_steps);
    for t in 0..behavior.max_steps {
        let action = if rng.gen::<f64>() < behavior.random_fraction {
            rng.gen_range(-1.0..=1.0)
        } else {
            let noise = behavior.action_noise * gaussian(&mut rng);
            (proportional(&behavior.gains, scale, &state) + noise).clamp(-1.0, 1.0)
        };
        let next = physics_step(&state, action, config)?;
        let done = config.termination(&next).is_some() || t + 1 == behavior.max_steps;
        out.push(Record {
            t,
            p: state.p,
            p_dot: state.p_dot,
            theta: state.theta,
            theta_dot: state.theta_dot,
            action,
            reward: reward(config, next.p, next.theta, next.theta_dot),
            done,
        });
        if done {
            break;
        }
        state = next;
    }
    Ok(out)
}

/// Largest wrapped angle change tolerated between consecutive records.
pub const MAX_ANGLE_JUMP: f64 = 1.0;

/// Drops out-of-track, non-finite and angle-discontinuous records and closes
/// episodes at every drop point.
pub fn clean_dataset(raw: &Dataset, config: &WorldConfig) -> Dataset {
    let mut out: Vec<Record> = Vec::with_capacity(raw.records.len());
    for ep in raw.episodes() {
        // Index in `out` of the previous kept record of the current segment.
        let mut prev: Option<usize> = None;
        for r in &raw.records[ep] {
            let valid = r.is_finite() && r.p.abs() <= config.track_limit;
            let continuous = match prev {
                Some(i) => {
                    let q = &out[i];
                    q.t + 1 == r.t && wrap_angle(r.theta - q.theta).abs() < MAX_ANGLE_JUMP
                }
                None => true,
            };
            if valid && continuous {
                out.push(r.clone());
                prev = if r.done { None } else { Some(out.len() - 1) };
            } else {
                if let Some(i) = prev {
                    out[i].done = true;
                }
                prev = None;
            }
        }
        if let Some(i) = prev {
            out[i].done = true;
        }
    }
    Dataset { records: out }
}

pub const WINDOW: usize = 8;

/// Features of the last record of an 8-record in-episode window, with the
/// three preceding actions as history.
pub fn to_features(window: &[Record]) -> Result<FeatureVector> {
    if window.len() != WINDOW {
        return data(format!(
            "window needs {WINDOW} records, got {}",
            window.len()
        ));
    }
    for pair in window.windows(2) {
        if pair[0].done || pair[0].t + 1 != pair[1].t {
            return data("window crosses an episode boundary");
        }
    }
    let last = &window[WINDOW - 1];
    Ok(FeatureVector::from_physical(
        &last.state(),
        [window[4].action, window[5].action, window[6].action],
    ))
}

/// Record indices that end a valid 8-step window.
pub fn eligible_positions(dataset: &Dataset) -> Vec<usize> {
    let mut out = Vec::new();
    for ep in dataset.episodes() {
        let recs = &dataset.records[ep.clone()];
        let mut run = 0usize;
        for (i, r) in recs.iter().enumerate() {
            run = if i > 0 && recs[i - 1].t + 1 == r.t {
                run + 1
            } else {
                1
            };
            if run >= WINDOW {
                out.push(ep.start + i);
            }
        }
    }
    out
}

/// `n` distinct window-end records drawn uniformly, as features.
pub fn sample_initial_states(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<FeatureVector>> {
    sample_initial_indices(dataset, n, seed)?
        .into_iter()
        .map(|i| to_features(&dataset.records[i + 1 - WINDOW..=i]))
        .collect()
}

/// Record indices behind [`sample_initial_states`].
pub fn sample_initial_indices(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    let eligible = eligible_positions(dataset);
    if n > eligible.len() {
        return data(format!(
            "requested {n} initial states, only {} eligible records",
            eligible.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|k| eligible[k])
        .collect())
}
