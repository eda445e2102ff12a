//! `qmoose`: data generation, dynamics training, policy training,
//! evaluation and latency benchmarking from one binary.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 data error, 4 numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qmoose::dynamics::{load_ensemble, save_ensemble, train_ensemble, NetTrainConfig};
use qmoose::harness::{
    bench_inference, binned_evaluation, centered_starts, run_episode, surrogate_sweep, BinsConfig,
    EpisodeConfig, EpisodeTrace, LatencyModel, Timing,
};
use qmoose::policy::{init_policy, PolicyCheckpoint, PolicyConfig, VqcPolicy};
use qmoose::trainer::{train_policy, TrainConfig};
use qmoose::world::{clean_dataset, generate_dataset, BehaviorSpec, Dataset, WorldConfig};
use qmoose::Execution;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "qmoose", version, long_version = LONG_VERSION, about = "Quantum-policy offline RL pipelines")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncheckpoint format qmoose-policy/1"
);

#[derive(Subcommand)]
enum Command {
    /// Simulate behavior episodes and write a cleaned dataset CSV.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the transition-model ensemble.
    TrainDynamics {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize the circuit policy through the ensemble.
    TrainPolicy(TrainPolicyArgs),
    /// Closed-loop evaluation in the surrogate or the simulator.
    Eval(EvalArgs),
    /// Time policy inference.
    Bench {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        /// Fail when the mean reaches the hard limit.
        #[arg(long)]
        enforce: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainPolicyArgs {
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_trainable_weights: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Write zero wall-clock times so outputs are reproducible.
    #[arg(long)]
    deterministic_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Surrogate,
    World,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "world")]
    mode: Mode,
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Binned start-position sweep (world mode).
    #[arg(long)]
    bins: bool,
    #[arg(long)]
    latency_ms: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Charge a fixed modeled compute time instead of measuring it.
    #[arg(long)]
    deterministic_timing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    starts: usize,
    max_theta0: f64,
    max_steps: usize,
    modeled_compute_ms: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            starts: 5,
            max_theta0: 0.03,
            max_steps: 500,
            modeled_compute_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    dataset: Option<PathBuf>,
    ensemble: Option<PathBuf>,
    policy: Option<PathBuf>,
    reports: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    episodes: usize,
    ensemble_size: usize,
    world: WorldConfig,
    behavior: BehaviorSpec,
    dynamics: NetTrainConfig,
    policy: PolicyConfig,
    train: TrainConfig,
    latency: LatencyModel,
    bins: BinsConfig,
    eval: EvalConfig,
    paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 150,
            ensemble_size: 20,
            world: WorldConfig::default(),
            behavior: BehaviorSpec::default(),
            dynamics: NetTrainConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            latency: LatencyModel::default(),
            bins: BinsConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Usage(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn required(
    flag: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    name: &str,
) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => usage(format!("--{name} is required")),
    }
}

fn existing(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(qmoose::Error::Data(format!("{what} {} not found", path.display())).into());
    }
    Ok(())
}

fn load_policy(path: &Path) -> anyhow::Result<VqcPolicy> {
    existing(path, "policy")?;
    let text = fs::read_to_string(path)?;
    let ckpt = PolicyCheckpoint::from_json(&text)
        .map_err(|e| qmoose::Error::Data(format!("{}: {e}", path.display())))?;
    Ok(ckpt.into_policy()?)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &RunConfig, episodes: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let episodes = episodes.unwrap_or(cfg.episodes);
    if episodes == 0 {
        return usage("--episodes must be at least 1");
    }
    let out = required(out, &cfg.paths.dataset, "out")?;
    let raw = generate_dataset(
        &cfg.world,
        &cfg.behavior,
        episodes,
        cfg.seed,
        Execution::Parallel,
    )?;
    let data = clean_dataset(&raw, &cfg.world);
    write_file(&out, &data.to_csv_bytes()?)?;
    println!(
        "records={} episodes={} transitions={}",
        data.len(),
        data.episode_count(),
        data.transitions().len()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    existing(path, "dataset")?;
    Ok(Dataset::load(path)?)
}

fn train_dynamics(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    k: Option<usize>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let data_path = required(data, &cfg.paths.dataset, "data")?;
    let out = required(out, &cfg.paths.ensemble, "out")?;
    let k = k.unwrap_or(cfg.ensemble_size);
    if k == 0 {
        return usage("--k must be at least 1");
    }
    let mut net = cfg.dynamics;
    if let Some(e) = epochs {
        net.epochs = e;
    }
    let dataset = load_dataset(&data_path)?;
    let fit = train_ensemble(&dataset, k, &net, cfg.seed, Execution::Parallel)?;
    save_ensemble(&fit, &out)?;
    let mean = fit.final_mse.iter().sum::<f64>() / fit.final_mse.len() as f64;
    println!(
        "models={k} mean_mse={mean} fingerprint={}",
        fit.ensemble.fingerprint()
    );
    Ok(())
}

fn cmd_train_policy(cfg: &RunConfig, args: TrainPolicyArgs) -> anyhow::Result<()> {
    let ens_path = required(args.ensemble, &cfg.paths.ensemble, "ensemble")?;
    let data_path = required(args.data, &cfg.paths.dataset, "data")?;
    let out = required(args.out, &cfg.paths.reports, "out")?;
    existing(&ens_path, "ensemble")?;
    let dataset = load_dataset(&data_path)?;
    let (ensemble, _) = load_ensemble(&ens_path)?;

    let mut pcfg = cfg.policy.clone();
    if args.no_trainable_weights {
        pcfg = pcfg.without_trainable_weights();
    }
    let mut tc = cfg.train.clone();
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.horizon {
        tc.horizon = v;
    }
    if let Some(v) = args.batch {
        tc.ensemble_batch = v;
    }
    if let Some(v) = args.lr {
        tc.adam.learning_rate = v;
    }
    if let Some(v) = args.checkpoint_every {
        tc.checkpoint_every = v;
    }
    if args.deterministic_timing {
        tc.record_timing = false;
    }

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let save =
        |params: &qmoose::policy::PolicyParams, step: usize, path: &Path| -> qmoose::Result<()> {
            let policy = VqcPolicy::new(pcfg.clone(), params.clone())?;
            PolicyCheckpoint::new(&policy, tc.seed, step).save(path)
        };
    save(
        &init_policy(&pcfg, tc.seed),
        0,
        &ckpt_dir.join("step_000000.json"),
    )?;
    let (params, report) = train_policy(
        &ensemble,
        &dataset,
        &pcfg,
        &tc,
        &cfg.world,
        Execution::Parallel,
        |step, p| {
            eprintln!("step {step}");
            save(p, step, &ckpt_dir.join(format!("step_{step:06}.json")))
        },
    )?;
    save(&params, tc.epochs, &out.join("policy.json"))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&out.join("report.csv"), &csv)?;
    match report.rows.last() {
        Some(r) => println!("steps={} final_loss={}", r.step, r.loss),
        None => println!("steps=0"),
    }
    Ok(())
}

fn write_trace(path: &Path, trace: &EpisodeTrace) -> anyhow::Result<()> {
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    write_file(path, &csv)
}

fn eval(cfg: &RunConfig, args: EvalArgs) -> anyhow::Result<()> {
    let policy_path = required(args.policy, &cfg.paths.policy, "policy")?;
    let out = required(args.out, &cfg.paths.reports, "out")?;
    let policy = load_policy(&policy_path)?;
    let timing = if args.deterministic_timing {
        Timing::Modeled {
            compute_ms: cfg.eval.modeled_compute_ms,
        }
    } else {
        Timing::Measured
    };
    let mut latency = cfg.latency;
    if let Some(ms) = args.latency_ms {
        latency = LatencyModel::fixed(ms);
    }
    let max_steps = args.max_steps.unwrap_or(cfg.eval.max_steps);
    let starts = centered_starts(cfg.eval.starts, cfg.eval.max_theta0);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match args.mode {
        Mode::Surrogate => {
            let ens_path = required(args.ensemble, &cfg.paths.ensemble, "ensemble")?;
            existing(&ens_path, "ensemble")?;
            let (ensemble, _) = load_ensemble(&ens_path)?;
            let traces = surrogate_sweep(
                &policy,
                &ensemble,
                &cfg.world,
                &starts,
                max_steps,
                timing,
                Execution::Parallel,
            )?;
            for (i, tr) in traces.iter().enumerate() {
                write_trace(&out.join(format!("surrogate_{i:02}.csv")), tr)?;
            }
            let steps: Vec<usize> = traces.iter().map(|t| t.steps_balanced).collect();
            println!("mode=surrogate steps={steps:?}");
        }
        Mode::World if args.bins => {
            let bins = BinsConfig {
                episode: EpisodeConfig {
                    max_steps,
                    latency,
                    timing,
                },
                ..cfg.bins
            };
            let report =
                binned_evaluation(&policy, &cfg.world, &bins, cfg.seed, Execution::Parallel)?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            write_file(&out.join("bins.csv"), &csv)?;
            let mean =
                report.bins.iter().map(|b| b.mean_steps).sum::<f64>() / report.bins.len() as f64;
            println!("mode=world bins={} mean_steps={mean}", report.bins.len());
        }
        Mode::World => {
            let ep = EpisodeConfig {
                max_steps,
                latency,
                timing,
            };
            let mut steps = Vec::new();
            for (i, s0) in starts.iter().enumerate() {
                let tr = run_episode(
                    &policy,
                    &cfg.world,
                    s0.to_physical(),
                    &ep,
                    cfg.seed.wrapping_add(i as u64),
                )?;
                write_trace(&out.join(format!("world_{i:02}.csv")), &tr)?;
                steps.push(tr.steps_balanced);
            }
            let mean = steps.iter().sum::<usize>() as f64 / steps.len().max(1) as f64;
            println!("mode=world steps={steps:?} mean_steps={mean}");
        }
    }
    Ok(())
}

/// Hard limit on mean per-action inference time.
const LATENCY_LIMIT_MS: f64 = 15.0;

fn bench(
    cfg: &RunConfig,
    policy: Option<PathBuf>,
    trials: usize,
    warmup: usize,
    enforce: bool,
    out: Option<PathBuf>,
) -> anyhow::Result<bool> {
    if trials < qmoose::harness::MIN_TRIALS {
        return usage(format!(
            "--trials must be at least {}",
            qmoose::harness::MIN_TRIALS
        ));
    }
    let policy_path = required(policy, &cfg.paths.policy, "policy")?;
    let policy = load_policy(&policy_path)?;
    let stats = bench_inference(&policy, trials, warmup, cfg.seed)?;
    println!(
        "trials={trials} mean_ms={:.4} std_ms={:.4} p99_ms={:.4}",
        stats.mean, stats.std, stats.p99
    );
    if let Some(out) = out {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trials", "warmup", "mean_ms", "std_ms", "p99_ms"])?;
        w.write_record([
            trials.to_string(),
            warmup.to_string(),
            stats.mean.to_string(),
            stats.std.to_string(),
            stats.p99.to_string(),
        ])?;
        write_file(&out, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    }
    Ok(!(enforce && stats.mean >= LATENCY_LIMIT_MS))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<qmoose::Error>() {
        Some(qmoose::Error::Config(_) | qmoose::Error::Unsupported(_)) => 2,
        Some(qmoose::Error::Data(_) | qmoose::Error::Csv(_) | qmoose::Error::Json(_)) => 3,
        Some(qmoose::Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = load_config(&cli)?;
    let workers = match cli.command {
        Command::Bench { .. } => Some(1),
        _ => cli.workers,
    };
    if let Some(n) = workers {
        if n == 0 {
            return usage("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::GenData { episodes, out } => gen_data(&cfg, episodes, out)?,
        Command::TrainDynamics {
            data,
            k,
            epochs,
            out,
        } => train_dynamics(&cfg, data, k, epochs, out)?,
        Command::TrainPolicy(args) => cmd_train_policy(&cfg, args)?,
        Command::Eval(args) => eval(&cfg, args)?,
        Command::Bench {
            policy,
            trials,
            warmup,
            enforce,
            out,
        } => return bench(&cfg, policy, trials, warmup, enforce, out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: mean inference latency at or above {LATENCY_LIMIT_MS} ms");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
