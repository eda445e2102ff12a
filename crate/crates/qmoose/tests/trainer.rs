mod common;

use qmoose::dynamics::{
    net_forward, step_features, train_ensemble, Activation, NetTrainConfig, TransitionEnsemble,
    TransitionNet,
};
use qmoose::optim::{adam_step, AdamConfig, AdamState};
use qmoose::policy::{
    init_policy, policy_gradient, FeatureVector, PolicyCheckpoint, PolicyConfig, PolicyParams,
    VqcPolicy,
};
use qmoose::trainer::{
    discounted_sum, loss_and_grad, rollout, train_from, train_policy, weight_stats, ConstantReward,
    TrainConfig, TrainReport, REPORT_HEADER,
};
use qmoose::world::{
    clean_dataset, generate_dataset, reward, reward_grad, BehaviorSpec, Dataset, PhysicalState,
    WorldConfig,
};
use qmoose::{Error, Execution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn start(theta: f64, p: f64) -> FeatureVector {
    FeatureVector::from_physical(
        &PhysicalState {
            p,
            p_dot: 0.1,
            theta,
            theta_dot: -0.2,
        },
        [0.1, -0.2, 0.3],
    )
}

/// Random net with small outputs so rollouts stay near upright.
fn gentle_net(seed: u64) -> TransitionNet {
    let mut net = TransitionNet::random(12, Activation::Tanh, seed);
    net.layers[2].weights.iter_mut().for_each(|w| *w *= 0.02);
    net
}

fn policy(cfg: PolicyConfig, seed: u64) -> VqcPolicy {
    let params = init_policy(&cfg, seed);
    VqcPolicy::new(cfg, params).unwrap()
}

#[test]
fn discount_identities() {
    let world = WorldConfig::default();
    let pol = policy(PolicyConfig::default(), 1);
    let net = gentle_net(2);
    let s0 = start(0.05, 0.2);
    let r0 = rollout(&pol, &net, &s0, 0.0, 10, &world).unwrap();
    assert_eq!(r0.discounted_return, r0.rewards[0]);
    let r1 = rollout(&pol, &net, &s0, 1.0, 10, &world).unwrap();
    let plain: f64 = r1.rewards.iter().sum();
    assert_eq!(r1.discounted_return, plain);
    assert_eq!(r1.discounted_return, discounted_sum(&r1.rewards, 1.0));
    assert!(r1.rewards.len() <= 10);
}

#[test]
fn constant_reward_geometric_series() {
    let pol = policy(PolicyConfig::default(), 3);
    let net = TransitionNet::zeros(8, Activation::Tanh);
    let r = rollout(
        &pol,
        &net,
        &start(0.0, 0.0),
        0.99,
        200,
        &ConstantReward(-1.0),
    )
    .unwrap();
    let closed = -(1.0 - 0.99f64.powi(200)) / 0.01;
    assert!((r.discounted_return - closed).abs() < 1e-9);
    assert!((closed + 86.60).abs() < 0.01);
    assert!(r.grad.iter().all(|g| *g == 0.0));
}

#[test]
fn single_step_gradient_matches_hand_chain() {
    let world = WorldConfig::default();
    let cfg = PolicyConfig {
        action_clip: 0.0,
        ..PolicyConfig::default()
    };
    let pol = policy(cfg.clone(), 4);
    let net = gentle_net(5);
    let s0 = start(0.08, -0.4);
    let out = rollout(&pol, &net, &s0, 0.99, 1, &world).unwrap();

    let a = pol.act(&s0).unwrap();
    let next = |a: f64| {
        step_features(&s0, a, &net_forward(&net, &s0, a).unwrap())
            .unwrap()
            .to_array()
    };
    let s1 = next(a);
    let theta = s1[3].atan2(s1[2]);
    assert!((out.discounted_return - reward(&world, s1[0], theta, s1[4])).abs() < 1e-15);

    let [dp, dth, dw] = reward_grad(&world, s1[0], theta, s1[4]);
    let n2 = s1[2] * s1[2] + s1[3] * s1[3];
    let dr_ds1 = [
        dp,
        0.0,
        -dth * s1[3] / n2,
        dth * s1[2] / n2,
        dw,
        0.0,
        0.0,
        0.0,
    ];
    let h = 1e-6;
    let (plus, minus) = (next(a + h), next(a - h));
    let dr_da: f64 = (0..8)
        .map(|i| dr_ds1[i] * (plus[i] - minus[i]) / (2.0 * h))
        .sum();
    let da_dparams = policy_gradient(&cfg, &pol.params, &s0).unwrap().to_flat();
    for (g, d) in out.grad.iter().zip(&da_dparams) {
        let expected = dr_da * d;
        assert!(
            (g - expected).abs() < 1e-6 * expected.abs().max(1e-3),
            "{g} vs {expected}"
        );
    }
}

#[test]
fn batch_loss_matches_finite_differences() {
    let world = WorldConfig::default();
    let cfg = PolicyConfig {
        n_qubits: 1,
        n_layers: 1,
        action_clip: 0.0,
        ..PolicyConfig::default()
    };
    let ensemble = TransitionEnsemble::new(vec![gentle_net(7), gentle_net(8)], vec![7, 8]).unwrap();
    let inits = vec![start(0.05, 0.3), start(-0.1, -0.5), start(0.02, 1.0)];
    let tc = TrainConfig {
        horizon: 3,
        ensemble_batch: 4,
        ..TrainConfig::default()
    };
    let params = init_policy(&cfg, 6);
    let rng = ChaCha8Rng::seed_from_u64(10);
    let eval = |p: &[f64]| {
        let pol = VqcPolicy::new(cfg.clone(), PolicyParams::from_flat(&cfg, p).unwrap()).unwrap();
        loss_and_grad(
            &pol,
            &ensemble,
            &inits,
            &tc,
            &world,
            &mut rng.clone(),
            Execution::Sequential,
        )
        .unwrap()
    };
    let flat = params.to_flat();
    let batch = eval(&flat);
    let fd = common::fd_gradient(|p| eval(p).loss, &flat, 1e-6);
    for (a, b) in batch.grad.iter().zip(&fd) {
        assert!(common::close(*a, *b, 1e-4), "{a} vs {b}");
    }
}

#[test]
fn trivial_batches() {
    let world = WorldConfig::default();
    let pol = policy(PolicyConfig::default(), 2);
    let net = gentle_net(1);
    let ensemble = TransitionEnsemble::new(vec![net.clone()], vec![1]).unwrap();
    let s0 = start(0.03, 0.1);
    let single = rollout(&pol, &net, &s0, 0.99, 5, &world).unwrap();
    let tc = TrainConfig {
        horizon: 5,
        ensemble_batch: 1,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = loss_and_grad(
        &pol,
        &ensemble,
        &[s0],
        &tc,
        &world,
        &mut rng,
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(one.loss, -single.discounted_return);

    let tc8 = TrainConfig {
        ensemble_batch: 8,
        ..tc.clone()
    };
    let many = loss_and_grad(
        &pol,
        &ensemble,
        &[s0],
        &tc8,
        &world,
        &mut rng,
        Execution::Parallel,
    )
    .unwrap();
    assert!((many.loss + single.discounted_return).abs() < 1e-12);
    assert!(matches!(
        loss_and_grad(
            &pol,
            &ensemble,
            &[],
            &tc,
            &world,
            &mut rng,
            Execution::Sequential
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn degenerate_step_truncates() {
    let world = WorldConfig::default();
    let pol = policy(PolicyConfig::default(), 2);
    let s0 = start(0.3, 0.0);
    let mut net = TransitionNet::zeros(4, Activation::Tanh);
    net.layers[2].bias[2] = -s0.cos_theta;
    net.layers[2].bias[3] = -s0.sin_theta;
    let r = rollout(&pol, &net, &s0, 0.99, 10, &world).unwrap();
    assert!(r.truncated);
    assert!(r.rewards.is_empty());
    assert_eq!(r.discounted_return, 0.0);
}

#[test]
fn weight_stat_examples() {
    let zeros = PolicyParams {
        input_weights: vec![0.0; 16],
        variational: vec![0.0; 48],
        output_weight: 0.0,
    };
    let s = weight_stats(&zeros);
    assert_eq!(
        (s.input_weights, s.variational, s.output_weight),
        (0.0, 0.0, 0.0)
    );
    let cfg = PolicyConfig::default();
    assert_eq!(weight_stats(&init_policy(&cfg, 0)).input_weights, 1.0);
}

#[test]
fn adam_shape_mismatch() {
    let mut p = vec![0.0; 3];
    let mut st = AdamState::new(3);
    assert!(matches!(
        adam_step(&mut p, &[0.0; 2], &mut st, &AdamConfig::default(), None),
        Err(Error::Config(_))
    ));
}

fn small_world_data() -> Dataset {
    let world = WorldConfig::default();
    clean_dataset(
        &generate_dataset(&world, &BehaviorSpec::default(), 8, 21, Execution::Parallel).unwrap(),
        &world,
    )
}

fn small_ensemble(data: &Dataset) -> TransitionEnsemble {
    let cfg = NetTrainConfig {
        hidden: 16,
        epochs: 2,
        ..NetTrainConfig::default()
    };
    train_ensemble(data, 3, &cfg, 2, Execution::Parallel)
        .unwrap()
        .ensemble
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        horizon: 15,
        n_init: 40,
        ensemble_batch: 8,
        epochs,
        checkpoint_every: 10,
        record_timing: false,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_contracts() {
    let world = WorldConfig::default();
    let data = small_world_data();
    let ensemble = small_ensemble(&data);
    let hash = ensemble.fingerprint();

    let cfg = PolicyConfig::default();
    let (p0, rep) = train_policy(
        &ensemble,
        &data,
        &cfg,
        &quick(1, 0),
        &world,
        Execution::Parallel,
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(p0, init_policy(&cfg, 1));
    assert!(rep.rows.is_empty());

    let mut seen = Vec::new();
    let run = |seen: &mut Vec<usize>| {
        train_policy(
            &ensemble,
            &data,
            &cfg,
            &quick(3, 25),
            &world,
            Execution::Parallel,
            |step, _| {
                seen.push(step);
                Ok(())
            },
        )
        .unwrap()
    };
    let (a, rep_a) = run(&mut seen);
    let (b, rep_b) = run(&mut Vec::new());
    assert_eq!(seen, vec![10, 20, 25]);
    assert_eq!(a, b);
    assert_eq!(rep_a, rep_b);
    let pol = VqcPolicy::new(cfg.clone(), a).unwrap();
    let bytes = |p: &VqcPolicy| PolicyCheckpoint::new(p, 3, 25).to_json().unwrap();
    assert_eq!(bytes(&pol), bytes(&VqcPolicy::new(cfg.clone(), b).unwrap()));
    assert!(rep_a.rows.windows(2).all(|w| w[0].step < w[1].step));
    assert!(rep_a.rows.iter().all(|r| r.wall_ms >= 0.0));
    assert_eq!(ensemble.fingerprint(), hash);

    let mut csv = Vec::new();
    rep_a.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER.join(","));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn frozen_weights_stay_bit_identical() {
    let world = WorldConfig::default();
    let data = small_world_data();
    let ensemble = small_ensemble(&data);
    let cfg = PolicyConfig::default().without_trainable_weights();
    let (p, _) = train_policy(
        &ensemble,
        &data,
        &cfg,
        &quick(4, 100),
        &world,
        Execution::Parallel,
        |_, _| Ok(()),
    )
    .unwrap();
    let init = init_policy(&cfg, 4);
    assert_eq!(p.input_weights, init.input_weights);
    assert_eq!(p.output_weight.to_bits(), 1f64.to_bits());
    assert_ne!(p.variational, init.variational);
}

#[test]
fn fifty_steps_reduce_loss() {
    let world = WorldConfig::default();
    let data = small_world_data();
    let ensemble = small_ensemble(&data);
    let cfg = PolicyConfig::default();
    let inits = qmoose::world::sample_initial_states(&data, 40, 0).unwrap();
    let mut improved = 0;
    for seed in 0..5 {
        let tc = TrainConfig {
            ensemble_batch: 16,
            ..quick(seed, 50)
        };
        let eval_cfg = TrainConfig {
            ensemble_batch: 64,
            ..tc.clone()
        };
        let loss = |p: &PolicyParams| {
            let pol = VqcPolicy::new(cfg.clone(), p.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            loss_and_grad(
                &pol,
                &ensemble,
                &inits,
                &eval_cfg,
                &world,
                &mut rng,
                Execution::Parallel,
            )
            .unwrap()
            .loss
        };
        let mut params = init_policy(&cfg, seed);
        let before = loss(&params);
        let mut report = TrainReport::default();
        train_from(
            &ensemble,
            &inits,
            &cfg,
            &tc,
            &world,
            Execution::Parallel,
            &mut params,
            &mut report,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        if loss(&params) < before {
            improved += 1;
        }
    }
    assert!(improved >= 4, "{improved}/5 seeds improved");
}

#[test]
fn config_validation() {
    for bad in [
        TrainConfig {
            gamma: -0.1,
            ..TrainConfig::default()
        },
        TrainConfig {
            horizon: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            ensemble_batch: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
