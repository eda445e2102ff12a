//! Model-based offline policy optimization through the frozen ensemble.
//!
//! Each rollout runs the policy inside one transition model for `horizon`
//! steps and backpropagates the discounted return through the policy, the
//! model and the reward, all analytically.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    step_features, step_features_backward, ForwardCache, TransitionEnsemble, TransitionNet,
    OUTPUT_DIM,
};
use crate::error::{config, Result};
use crate::exec::{tree_sum, tree_sum_scalar, Execution};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::policy::{
    init_policy, ActionJacobian, FeatureVector, PolicyConfig, PolicyEvaluator, PolicyParams,
    VqcPolicy, FEATURE_DIM,
};
use crate::world::{reward, reward_grad, sample_initial_states, Dataset, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub horizon: usize,
    pub n_init: usize,
    /// `(initial state, model)` pairs per gradient step.
    pub ensemble_batch: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub checkpoint_every: usize,
    /// Global gradient-norm clip before Adam; 0 disables.
    pub grad_clip: f64,
    /// Roll every sampled initial state through all K models instead of one
    /// sampled model.
    pub full_model_average: bool,
    pub record_timing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            horizon: 100,
            n_init: 400,
            ensemble_batch: 64,
            adam: AdamConfig::default(),
            epochs: 2000,
            checkpoint_every: 100,
            grad_clip: 10.0,
            full_model_average: false,
            record_timing: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return config(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.horizon == 0 {
            return config("horizon must be at least 1");
        }
        if self.ensemble_batch == 0 {
            return config("ensemble_batch must be at least 1");
        }
        if self.n_init == 0 {
            return config("n_init must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return config("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

/// Reward of the state reached by a rollout step, with its feature gradient.
pub trait RolloutReward: Sync {
    fn reward(&self, s_next: &FeatureVector) -> (f64, [f64; FEATURE_DIM]);
}

impl RolloutReward for WorldConfig {
    fn reward(&self, s: &FeatureVector) -> (f64, [f64; FEATURE_DIM]) {
        let theta = s.theta();
        let r = reward(self, s.p, theta, s.theta_dot);
        let [dp, dth, dw] = reward_grad(self, s.p, theta, s.theta_dot);
        let n2 = s.cos_theta * s.cos_theta + s.sin_theta * s.sin_theta;
        let mut g = [0.0; FEATURE_DIM];
        g[0] = dp;
        // θ = atan2(sin, cos)
        g[2] = -dth * s.sin_theta / n2;
        g[3] = dth * s.cos_theta / n2;
        g[4] = dw;
        (r, g)
    }
}

/// Fixed reward independent of the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantReward(pub f64);

impl RolloutReward for ConstantReward {
    fn reward(&self, _: &FeatureVector) -> (f64, [f64; FEATURE_DIM]) {
        (self.0, [0.0; FEATURE_DIM])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `s_0 … s_T`.
    pub states: Vec<FeatureVector>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub discounted_return: f64,
    /// `d return / d params`, flat policy layout.
    pub grad: Vec<f64>,
    /// Stopped early on a numeric failure.
    pub truncated: bool,
}

/// `Σ γ^t r_t`, accumulated in step order.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

struct StepTape {
    jac: ActionJacobian,
    cache: ForwardCache,
    delta: [f64; OUTPUT_DIM],
    reward_grad: [f64; FEATURE_DIM],
}

/// Differentiable rollout of `horizon` steps inside one model.
pub fn rollout(
    policy: &VqcPolicy,
    model: &TransitionNet,
    s0: &FeatureVector,
    gamma: f64,
    horizon: usize,
    reward_fn: &dyn RolloutReward,
) -> Result<RolloutResult> {
    let mut eval = PolicyEvaluator::new(&policy.config, &policy.params)?;
    rollout_with(&mut eval, model, s0, gamma, horizon, reward_fn)
}

fn rollout_with(
    eval: &mut PolicyEvaluator<'_>,
    model: &TransitionNet,
    s0: &FeatureVector,
    gamma: f64,
    horizon: usize,
    reward_fn: &dyn RolloutReward,
) -> Result<RolloutResult> {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut tape: Vec<StepTape> = Vec::with_capacity(horizon);
    let mut truncated = false;
    states.push(*s0);

    for _ in 0..horizon {
        let s = *states.last().expect("non-empty");
        let Ok(jac) = eval.evaluate(&s) else {
            truncated = true;
            break;
        };
        let mut cache = ForwardCache::default();
        let step = model
            .forward_cached(&s, jac.action, &mut cache)
            .and_then(|delta| step_features(&s, jac.action, &delta).map(|n| (delta, n)));
        let Ok((delta, next)) = step else {
            truncated = true;
            break;
        };
        let (r, rg) = reward_fn.reward(&next);
        if !next.is_finite() || !r.is_finite() {
            truncated = true;
            break;
        }
        actions.push(jac.action);
        rewards.push(r);
        states.push(next);
        tape.push(StepTape {
            jac,
            cache,
            delta,
            reward_grad: rg,
        });
    }

    let n_params = eval.n_params();
    let mut grad = vec![0.0; n_params];
    let mut g_state = [0.0; FEATURE_DIM];
    let mut discount: Vec<f64> = Vec::with_capacity(tape.len());
    let mut d = 1.0;
    for _ in 0..tape.len() {
        discount.push(d);
        d *= gamma;
    }
    for (t, step) in tape.iter().enumerate().rev() {
        let mut g_next = g_state;
        for (g, r) in g_next.iter_mut().zip(&step.reward_grad) {
            *g += discount[t] * r;
        }
        let (mut g_s, mut g_a, g_delta) = step_features_backward(&states[t], &step.delta, &g_next);
        let (g_s_net, g_a_net) = model.backward_cached(&step.cache, &g_delta);
        for (a, b) in g_s.iter_mut().zip(&g_s_net) {
            *a += b;
        }
        g_a += g_a_net;
        if g_a != 0.0 {
            for (g, d) in grad.iter_mut().zip(&step.jac.d_params) {
                *g += g_a * d;
            }
            for (a, d) in g_s.iter_mut().zip(&step.jac.d_features) {
                *a += g_a * d;
            }
        }
        g_state = g_s;
    }

    Ok(RolloutResult {
        discounted_return: discounted_sum(&rewards, gamma),
        states,
        actions,
        rewards,
        grad,
        truncated,
    })
}

/// Negative mean return and its gradient over one sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub truncated: usize,
}

/// Samples `(initial state, model)` pairs and averages the rollouts.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    policy: &VqcPolicy,
    ensemble: &TransitionEnsemble,
    init_states: &[FeatureVector],
    cfg: &TrainConfig,
    reward_fn: &dyn RolloutReward,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> Result<BatchLoss> {
    if init_states.is_empty() {
        return config("no initial states");
    }
    let k = ensemble.len();
    let mut pairs = Vec::new();
    for _ in 0..cfg.ensemble_batch {
        let n = rng.gen_range(0..init_states.len());
        if cfg.full_model_average {
            pairs.extend((0..k).map(|m| (n, m)));
        } else {
            pairs.push((n, rng.gen_range(0..k)));
        }
    }
    let results = exec.map(&pairs, |&(n, m)| {
        rollout(
            policy,
            &ensemble.models[m],
            &init_states[n],
            cfg.gamma,
            cfg.horizon,
            reward_fn,
        )
    });
    let mut returns = Vec::with_capacity(results.len());
    let mut grads = Vec::with_capacity(results.len());
    let mut truncated = 0;
    for r in results {
        let r = r?;
        truncated += usize::from(r.truncated);
        returns.push(r.discounted_return);
        grads.push(r.grad);
    }
    let b = pairs.len() as f64;
    let mut grad = tree_sum(grads).expect("batch is non-empty");
    grad.iter_mut().for_each(|g| *g = -*g / b);
    Ok(BatchLoss {
        loss: -tree_sum_scalar(&returns) / b,
        grad,
        truncated,
    })
}

/// Mean absolute value of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub input_weights: f64,
    pub variational: f64,
    pub output_weight: f64,
}

pub fn weight_stats(params: &PolicyParams) -> WeightStats {
    let mean_abs = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
        }
    };
    WeightStats {
        input_weights: mean_abs(&params.input_weights),
        variational: mean_abs(&params.variational),
        output_weight: params.output_weight.abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub loss: f64,
    pub stats: WeightStats,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    /// Batch loss of every gradient step, in order.
    pub loss_history: Vec<f64>,
}

pub const REPORT_HEADER: [&str; 6] = [
    "step",
    "loss",
    "mean_abs_input_w",
    "mean_abs_variational",
    "mean_abs_output_w",
    "wall_ms",
];

impl TrainReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.stats.input_weights.to_string(),
                r.stats.variational.to_string(),
                r.stats.output_weight.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Full training loop. `on_checkpoint` is called with the step and the
/// parameters after each reported step.
pub fn train_policy(
    ensemble: &TransitionEnsemble,
    dataset: &Dataset,
    policy_cfg: &PolicyConfig,
    cfg: &TrainConfig,
    world: &WorldConfig,
    exec: Execution,
    mut on_checkpoint: impl FnMut(usize, &PolicyParams) -> Result<()>,
) -> Result<(PolicyParams, TrainReport)> {
    cfg.validate()?;
    policy_cfg.validate()?;
    world.validate()?;
    let mut params = init_policy(policy_cfg, cfg.seed);
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let init_states = sample_initial_states(dataset, cfg.n_init, cfg.seed)?;
    train_from(
        ensemble,
        &init_states,
        policy_cfg,
        cfg,
        world,
        exec,
        &mut params,
        &mut report,
        &mut on_checkpoint,
    )?;
    Ok((params, report))
}

/// Training loop over explicit initial states, continuing from `params`.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    ensemble: &TransitionEnsemble,
    init_states: &[FeatureVector],
    policy_cfg: &PolicyConfig,
    cfg: &TrainConfig,
    reward_fn: &dyn RolloutReward,
    exec: Execution,
    params: &mut PolicyParams,
    report: &mut TrainReport,
    on_checkpoint: &mut dyn FnMut(usize, &PolicyParams) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let mask = policy_cfg.trainable_mask();
    let mut flat = params.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let start = Instant::now();

    for step in 1..=cfg.epochs {
        let policy = VqcPolicy::new(
            policy_cfg.clone(),
            PolicyParams::from_flat(policy_cfg, &flat)?,
        )?;
        let mut batch = loss_and_grad(
            &policy,
            ensemble,
            init_states,
            cfg,
            reward_fn,
            &mut rng,
            exec,
        )?;
        clip_global_norm(&mut batch.grad, cfg.grad_clip);
        adam_step(&mut flat, &batch.grad, &mut state, &cfg.adam, Some(&mask))?;
        report.loss_history.push(batch.loss);
        if step % cfg.checkpoint_every == 0 || step == cfg.epochs {
            let current = PolicyParams::from_flat(policy_cfg, &flat)?;
            let wall_ms = if cfg.record_timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            report.rows.push(ReportRow {
                step,
                loss: batch.loss,
                stats: weight_stats(&current),
                wall_ms,
            });
            on_checkpoint(step, &current)?;
        }
    }
    *params = PolicyParams::from_flat(policy_cfg, &flat)?;
    Ok(())
}
