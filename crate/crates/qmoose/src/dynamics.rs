//! Ensemble of feed-forward transition models with input-gradient support.
//!
//! Each model maps `(features, action)` (9 inputs) to the change of the five
//! physical feature components `(p, ṗ, cos θ, sin θ, θ̇)`. Inputs and targets
//! are standardized with statistics of the full training set.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, data, numeric, Error, Result};
use crate::exec::Execution;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::policy::{FeatureVector, FEATURE_DIM};
use crate::world::{Dataset, TransitionSample};

pub const INPUT_DIM: usize = FEATURE_DIM + 1;
pub const OUTPUT_DIM: usize = 5;
pub const MIN_STD: f64 = 1e-8;
pub const MIN_TRANSITIONS: usize = 1000;
const MIN_TRIG_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear hidden layers; used for test fixtures.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer, `weights` row-major `[outputs × inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.gen_range(-limit..limit))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// `out = Wᵀ g`.
    #[inline]
    fn backward_input(&self, g: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (row, &gi) in self.weights.chunks_exact(self.inputs).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
    }

    fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.outputs, self.inputs), &self.weights).expect("dense shape")
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[Vec<f64>], dim: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(MIN_STD)).collect();
        Self { mean, std }
    }
}

/// `[9 → h → h → 5]` MLP predicting standardized feature deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionNet {
    pub activation: Activation,
    pub layers: [Dense; 3],
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
}

/// Intermediate values of one forward pass, needed by the backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl TransitionNet {
    pub fn zeros(hidden: usize, activation: Activation) -> Self {
        Self {
            activation,
            layers: [
                Dense::zeros(INPUT_DIM, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, OUTPUT_DIM),
            ],
            input_norm: Standardizer::identity(INPUT_DIM),
            output_norm: Standardizer::identity(OUTPUT_DIM),
        }
    }

    pub fn random(hidden: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            activation,
            layers: [
                Dense::glorot(INPUT_DIM, hidden, &mut rng),
                Dense::glorot(hidden, hidden, &mut rng),
                Dense::glorot(hidden, OUTPUT_DIM, &mut rng),
            ],
            input_norm: Standardizer::identity(INPUT_DIM),
            output_norm: Standardizer::identity(OUTPUT_DIM),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let shapes_ok = self.layers[0].inputs == INPUT_DIM
            && self.layers[1].inputs == h
            && self.layers[1].outputs == h
            && self.layers[2].inputs == h
            && self.layers[2].outputs == OUTPUT_DIM
            && self
                .layers
                .iter()
                .all(|l| l.weights.len() == l.inputs * l.outputs && l.bias.len() == l.outputs)
            && self.input_norm.mean.len() == INPUT_DIM
            && self.input_norm.std.len() == INPUT_DIM
            && self.output_norm.mean.len() == OUTPUT_DIM
            && self.output_norm.std.len() == OUTPUT_DIM;
        if !shapes_ok {
            return config("transition net has inconsistent layer shapes");
        }
        if !self.layers.iter().all(Dense::is_finite) {
            return numeric("transition net has non-finite parameters");
        }
        if self
            .input_norm
            .std
            .iter()
            .chain(&self.output_norm.std)
            .any(|&s| s.is_nan() || s < MIN_STD)
        {
            return config(format!("standardization std below {MIN_STD}"));
        }
        Ok(())
    }

    fn standardize_input(&self, s: &FeatureVector, a: f64) -> [f64; INPUT_DIM] {
        let mut z = [0.0; INPUT_DIM];
        let x = s.to_array();
        for i in 0..INPUT_DIM {
            let v = if i < FEATURE_DIM { x[i] } else { a };
            z[i] = (v - self.input_norm.mean[i]) / self.input_norm.std[i];
        }
        z
    }

    /// Forward pass keeping the hidden activations.
    pub fn forward_cached(
        &self,
        s: &FeatureVector,
        a: f64,
        cache: &mut ForwardCache,
    ) -> Result<[f64; OUTPUT_DIM]> {
        if !s.is_finite() || !a.is_finite() {
            return numeric(format!("non-finite transition input {s:?}, action {a}"));
        }
        let h = self.hidden();
        cache.h1.resize(h, 0.0);
        cache.h2.resize(h, 0.0);
        let z = self.standardize_input(s, a);
        self.layers[0].forward(&z, &mut cache.h1);
        cache
            .h1
            .iter_mut()
            .for_each(|v| *v = self.activation.apply(*v));
        self.layers[1].forward(&cache.h1, &mut cache.h2);
        cache
            .h2
            .iter_mut()
            .for_each(|v| *v = self.activation.apply(*v));
        let mut y = [0.0; OUTPUT_DIM];
        self.layers[2].forward(&cache.h2, &mut y);
        for (i, v) in y.iter_mut().enumerate() {
            *v = *v * self.output_norm.std[i] + self.output_norm.mean[i];
        }
        Ok(y)
    }

    /// Vector-Jacobian product through a cached forward pass.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &[f64; OUTPUT_DIM],
    ) -> ([f64; FEATURE_DIM], f64) {
        let h = self.hidden();
        let mut gy = [0.0; OUTPUT_DIM];
        for i in 0..OUTPUT_DIM {
            gy[i] = upstream[i] * self.output_norm.std[i];
        }
        let mut g2 = vec![0.0; h];
        self.layers[2].backward_input(&gy, &mut g2);
        for (g, y) in g2.iter_mut().zip(&cache.h2) {
            *g *= self.activation.slope(*y);
        }
        let mut g1 = vec![0.0; h];
        self.layers[1].backward_input(&g2, &mut g1);
        for (g, y) in g1.iter_mut().zip(&cache.h1) {
            *g *= self.activation.slope(*y);
        }
        let mut gz = [0.0; INPUT_DIM];
        self.layers[0].backward_input(&g1, &mut gz);
        let mut gs = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            gs[i] = gz[i] / self.input_norm.std[i];
        }
        (gs, gz[FEATURE_DIM] / self.input_norm.std[FEATURE_DIM])
    }
}

/// Predicted change of `(p, ṗ, cos θ, sin θ, θ̇)`.
pub fn net_forward(net: &TransitionNet, s: &FeatureVector, a: f64) -> Result<[f64; OUTPUT_DIM]> {
    net.forward_cached(s, a, &mut ForwardCache::default())
}

/// Gradients of `upstream · delta` w.r.t. the state features and the action.
/// Model parameters are treated as constants.
pub fn net_backward(
    net: &TransitionNet,
    s: &FeatureVector,
    a: f64,
    upstream: &[f64; OUTPUT_DIM],
) -> Result<([f64; FEATURE_DIM], f64)> {
    let mut cache = ForwardCache::default();
    net.forward_cached(s, a, &mut cache)?;
    Ok(net.backward_cached(&cache, upstream))
}

/// Applies a predicted delta and shifts the action history. The angle
/// embedding is projected back onto the unit circle.
pub fn step_features(
    s: &FeatureVector,
    a: f64,
    delta: &[f64; OUTPUT_DIM],
) -> Result<FeatureVector> {
    let u = s.cos_theta + delta[2];
    let v = s.sin_theta + delta[3];
    let n = (u * u + v * v).sqrt();
    if n.is_nan() || n < MIN_TRIG_NORM {
        return numeric(format!("degenerate angle embedding norm {n}"));
    }
    Ok(FeatureVector {
        p: s.p + delta[0],
        p_dot: s.p_dot + delta[1],
        cos_theta: u / n,
        sin_theta: v / n,
        theta_dot: s.theta_dot + delta[4],
        a_prev3: s.a_prev2,
        a_prev2: s.a_prev1,
        a_prev1: a,
    })
}

/// Reverse of [`step_features`]: given `∂L/∂s_next`, returns
/// `(∂L/∂s, ∂L/∂a, ∂L/∂delta)` for the direct dependencies.
pub fn step_features_backward(
    s: &FeatureVector,
    delta: &[f64; OUTPUT_DIM],
    g_next: &[f64; FEATURE_DIM],
) -> ([f64; FEATURE_DIM], f64, [f64; OUTPUT_DIM]) {
    let u = s.cos_theta + delta[2];
    let v = s.sin_theta + delta[3];
    let n2 = u * u + v * v;
    let n3 = n2 * n2.sqrt();
    let (gc, gs) = (g_next[2], g_next[3]);
    // Jacobian of (u, v)/|(u, v)|
    let gu = (gc * v * v - gs * u * v) / n3;
    let gv = (-gc * u * v + gs * u * u) / n3;

    let g_delta = [g_next[0], g_next[1], gu, gv, g_next[4]];
    let mut g_s = [0.0; FEATURE_DIM];
    g_s[0] = g_next[0];
    g_s[1] = g_next[1];
    g_s[2] = gu;
    g_s[3] = gv;
    g_s[4] = g_next[4];
    // a_prev3' = a_prev2, a_prev2' = a_prev1, a_prev1' = a
    g_s[6] = g_next[5];
    g_s[7] = g_next[6];
    (g_s, g_next[7], g_delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEnsemble {
    pub models: Vec<TransitionNet>,
    pub seeds: Vec<u64>,
}

impl TransitionEnsemble {
    pub fn new(models: Vec<TransitionNet>, seeds: Vec<u64>) -> Result<Self> {
        if models.is_empty() || models.len() != seeds.len() {
            return config(format!(
                "{} models with {} seeds",
                models.len(),
                seeds.len()
            ));
        }
        for m in &models {
            m.validate()?;
        }
        Ok(Self { models, seeds })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// SHA-256 over every parameter's bytes, in a fixed order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.models {
            for l in &m.layers {
                for x in l.weights.iter().chain(&l.bias) {
                    h.update(x.to_le_bytes());
                }
            }
            for x in m
                .input_norm
                .mean
                .iter()
                .chain(&m.input_norm.std)
                .chain(&m.output_norm.mean)
                .chain(&m.output_norm.std)
            {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Mean over output dimensions of the across-model standard deviation.
pub fn ensemble_disagreement(
    ensemble: &TransitionEnsemble,
    s: &FeatureVector,
    a: f64,
) -> Result<f64> {
    let k = ensemble.len();
    if k < 2 {
        return config("disagreement needs at least two models");
    }
    let preds = ensemble
        .models
        .iter()
        .map(|m| net_forward(m, s, a))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for d in 0..OUTPUT_DIM {
        let mean = preds.iter().map(|p| p[d]).sum::<f64>() / k as f64;
        let var = preds.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / k as f64;
        total += var.sqrt();
    }
    Ok(total / OUTPUT_DIM as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for NetTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

/// Trained ensemble plus each model's final standardized MSE on the full
/// training set.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFit {
    pub ensemble: TransitionEnsemble,
    pub final_mse: Vec<f64>,
}

/// Derives the per-model seed; distinct for distinct `k`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k as u64 + 1)
}

pub fn train_ensemble(
    dataset: &Dataset,
    k: usize,
    cfg: &NetTrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleFit> {
    train_ensemble_on(&dataset.transitions(), k, cfg, seed, exec)
}

/// Trains `k` models, each on its own bootstrap resample with its own seed.
pub fn train_ensemble_on(
    samples: &[TransitionSample],
    k: usize,
    cfg: &NetTrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleFit> {
    if samples.is_empty() {
        return data("no transitions to train on");
    }
    if samples.len() < MIN_TRANSITIONS {
        return data(format!(
            "{} transitions, at least {MIN_TRANSITIONS} required",
            samples.len()
        ));
    }
    if k == 0 {
        return config("ensemble size must be at least 1");
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 {
        return config("hidden width and batch size must be positive");
    }

    let inputs: Vec<Vec<f64>> = samples
        .iter()
        .map(|t| {
            let mut v = t.s.to_array().to_vec();
            v.push(t.a);
            v
        })
        .collect();
    let targets: Vec<Vec<f64>> = samples
        .iter()
        .map(|t| {
            let (s, n) = (t.s.to_array(), t.s_next.to_array());
            (0..OUTPUT_DIM).map(|i| n[i] - s[i]).collect()
        })
        .collect();
    let input_norm = Standardizer::fit(&inputs, INPUT_DIM);
    let output_norm = Standardizer::fit(&targets, OUTPUT_DIM);

    let x = standardized_matrix(&inputs, &input_norm);
    let y = standardized_matrix(&targets, &output_norm);
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return numeric("training data contains non-finite values");
    }

    let seeds: Vec<u64> = (0..k).map(|i| member_seed(seed, i)).collect();
    let fits = exec.map(&seeds, |&s| {
        let mut net = TransitionNet::random(cfg.hidden, Activation::Tanh, s);
        net.input_norm = input_norm.clone();
        net.output_norm = output_norm.clone();
        fit_member(&mut net, &x, &y, cfg, s).map(|mse| (net, mse))
    });
    let mut models = Vec::with_capacity(k);
    let mut final_mse = Vec::with_capacity(k);
    for f in fits {
        let (net, mse) = f?;
        models.push(net);
        final_mse.push(mse);
    }
    Ok(EnsembleFit {
        ensemble: TransitionEnsemble::new(models, seeds)?,
        final_mse,
    })
}

fn standardized_matrix(rows: &[Vec<f64>], norm: &Standardizer) -> Array2<f64> {
    let dim = norm.mean.len();
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| {
        (rows[i][j] - norm.mean[j]) / norm.std[j]
    })
}

struct Grads {
    layers: [(Array2<f64>, Vec<f64>); 3],
}

fn fit_member(
    net: &mut TransitionNet,
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &NetTrainConfig,
    seed: u64,
) -> Result<f64> {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB007_57A9);
    let mut order: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut states: Vec<(AdamState, AdamState)> = net
        .layers
        .iter()
        .map(|l| {
            (
                AdamState::new(l.weights.len()),
                AdamState::new(l.bias.len()),
            )
        })
        .collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let grads = batch_gradients(net, &xb, &yb);
            for ((layer, (gw, gb)), (sw, sb)) in net
                .layers
                .iter_mut()
                .zip(grads.layers.iter())
                .zip(states.iter_mut())
            {
                let gw = gw.as_slice().expect("contiguous gradient");
                adam_step(&mut layer.weights, gw, sw, &adam, None)?;
                adam_step(&mut layer.bias, gb, sb, &adam, None)?;
            }
        }
    }
    net.validate()
        .map_err(|e| Error::Numeric(format!("training diverged: {e}")))?;
    Ok(batch_mse(net, x, y))
}

fn batch_forward(net: &TransitionNet, xb: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let act = net.activation;
    let affine = |input: &Array2<f64>, l: &Dense| {
        let mut out = input.dot(&l.view().t());
        for mut row in out.rows_mut() {
            for (v, b) in row.iter_mut().zip(&l.bias) {
                *v += b;
            }
        }
        out
    };
    let mut h1 = affine(xb, &net.layers[0]);
    h1.mapv_inplace(|v| act.apply(v));
    let mut h2 = affine(&h1, &net.layers[1]);
    h2.mapv_inplace(|v| act.apply(v));
    let out = affine(&h2, &net.layers[2]);
    (h1, h2, out)
}

fn batch_gradients(net: &TransitionNet, xb: &Array2<f64>, yb: &Array2<f64>) -> Grads {
    let act = net.activation;
    let (h1, h2, out) = batch_forward(net, xb);
    let scale = 2.0 / (xb.nrows() * OUTPUT_DIM) as f64;
    let d_out = (&out - yb) * scale;

    let bias_grad = |d: &Array2<f64>| d.sum_axis(Axis(0)).to_vec();
    let g3w = d_out.t().dot(&h2);
    let g3b = bias_grad(&d_out);
    let mut d2 = d_out.dot(&net.layers[2].view());
    d2.zip_mut_with(&h2, |g, &y| *g *= act.slope(y));
    let g2w = d2.t().dot(&h1);
    let g2b = bias_grad(&d2);
    let mut d1 = d2.dot(&net.layers[1].view());
    d1.zip_mut_with(&h1, |g, &y| *g *= act.slope(y));
    let g1w = d1.t().dot(xb);
    let g1b = bias_grad(&d1);
    Grads {
        layers: [
            (g1w.as_standard_layout().to_owned(), g1b),
            (g2w.as_standard_layout().to_owned(), g2b),
            (g3w.as_standard_layout().to_owned(), g3b),
        ],
    }
}

/// Mean squared error of standardized predictions.
fn batch_mse(net: &TransitionNet, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..x.nrows()).step_by(4096) {
        let end = (start + 4096).min(x.nrows());
        let xb = x.slice(ndarray::s![start..end, ..]).to_owned();
        let (_, _, out) = batch_forward(net, &xb);
        let diff = &out - &y.slice(ndarray::s![start..end, ..]);
        total += diff.iter().map(|d| d * d).sum::<f64>();
        count += diff.len();
    }
    total / count as f64
}

pub const ENSEMBLE_FORMAT: &str = "qmoose-ensemble/1";
pub const MODEL_FORMAT: &str = "qmoose-transition-net/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub k: usize,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub models: Vec<String>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    pub final_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    index: usize,
    seed: u64,
    net: TransitionNet,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus one `model_XX.json` per member into `dir`.
pub fn save_ensemble(fit: &EnsembleFit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ens = &fit.ensemble;
    let mut names = Vec::with_capacity(ens.len());
    for (i, (net, &seed)) in ens.models.iter().zip(&ens.seeds).enumerate() {
        let name = format!("model_{i:02}.json");
        let doc = ModelDocument {
            format: MODEL_FORMAT.into(),
            index: i,
            seed,
            net: net.clone(),
        };
        std::fs::write(dir.join(&name), serde_json::to_string_pretty(&doc)? + "\n")?;
        names.push(name);
    }
    let first = &ens.models[0];
    let manifest = EnsembleManifest {
        format: ENSEMBLE_FORMAT.into(),
        k: ens.len(),
        hidden: first.hidden(),
        seeds: ens.seeds.clone(),
        models: names,
        input_mean: first.input_norm.mean.clone(),
        input_std: first.input_norm.std.clone(),
        output_mean: first.output_norm.mean.clone(),
        output_std: first.output_norm.std.clone(),
        final_mse: fit.final_mse.clone(),
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<(TransitionEnsemble, EnsembleManifest)> {
    let manifest: EnsembleManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != ENSEMBLE_FORMAT || manifest.models.len() != manifest.k {
        return data(format!("bad ensemble manifest in {}", dir.display()));
    }
    let mut models = Vec::with_capacity(manifest.k);
    for name in &manifest.models {
        let doc: ModelDocument = serde_json::from_str(&std::fs::read_to_string(dir.join(name))?)?;
        if doc.format != MODEL_FORMAT {
            return data(format!("bad model document {name}"));
        }
        models.push(doc.net);
    }
    Ok((
        TransitionEnsemble::new(models, manifest.seeds.clone())?,
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features() -> FeatureVector {
        FeatureVector {
            p: 0.2,
            p_dot: -0.1,
            cos_theta: 0.6,
            sin_theta: 0.8,
            theta_dot: 0.3,
            a_prev3: 0.1,
            a_prev2: 0.2,
            a_prev1: 0.3,
        }
    }

    #[test]
    fn zero_net_predicts_zero() {
        let net = TransitionNet::zeros(8, Activation::Tanh);
        assert_eq!(
            net_forward(&net, &features(), 0.5).unwrap(),
            [0.0; OUTPUT_DIM]
        );
    }

    #[test]
    fn single_hidden_unit_by_hand() {
        // One active unit per hidden layer; everything else zero.
        let mut net = TransitionNet::zeros(1, Activation::Tanh);
        net.layers[0].weights[0] = 0.5; // from p
        net.layers[0].weights[INPUT_DIM - 1] = -1.5; // from action
        net.layers[0].bias[0] = 0.1;
        net.layers[1].weights[0] = 2.0;
        net.layers[1].bias[0] = -0.3;
        net.layers[2].weights[4] = 0.7; // into θ̇ delta
        net.layers[2].bias[4] = 0.05;
        net.output_norm.std[4] = 2.0;
        net.output_norm.mean[4] = 0.01;
        let s = features();
        let a = 0.4;
        let h1 = (0.5 * s.p - 1.5 * a + 0.1f64).tanh();
        let h2 = (2.0 * h1 - 0.3f64).tanh();
        let expected = (0.7 * h2 + 0.05) * 2.0 + 0.01;
        let out = net_forward(&net, &s, a).unwrap();
        assert!((out[4] - expected).abs() < 1e-12);
        assert_eq!(out[0], 0.0);
        assert_eq!(out, net_forward(&net, &s, a).unwrap());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = TransitionNet::random(16, Activation::Tanh, 1);
        let (gs, ga) = net_backward(&net, &features(), 0.2, &[0.0; OUTPUT_DIM]).unwrap();
        assert_eq!(gs, [0.0; FEATURE_DIM]);
        assert_eq!(ga, 0.0);
    }

    #[test]
    fn linear_net_gradient_is_weight_product() {
        let net = TransitionNet::random(6, Activation::Identity, 2);
        let w1 = Array2::from_shape_vec((6, INPUT_DIM), net.layers[0].weights.clone()).unwrap();
        let w2 = Array2::from_shape_vec((6, 6), net.layers[1].weights.clone()).unwrap();
        let w3 = Array2::from_shape_vec((OUTPUT_DIM, 6), net.layers[2].weights.clone()).unwrap();
        let jac = w3.dot(&w2).dot(&w1);
        let up = [0.3, -1.0, 0.5, 2.0, -0.7];
        let (gs, ga) = net_backward(&net, &features(), 0.1, &up).unwrap();
        for j in 0..INPUT_DIM {
            let expected: f64 = (0..OUTPUT_DIM).map(|i| up[i] * jac[[i, j]]).sum();
            let got = if j < FEATURE_DIM { gs[j] } else { ga };
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn step_examples() {
        let s = features();
        let next = step_features(&s, 0.5, &[0.0; OUTPUT_DIM]).unwrap();
        assert_eq!(next.p, s.p);
        assert_eq!(next.theta_dot, s.theta_dot);
        assert_eq!((next.a_prev3, next.a_prev2, next.a_prev1), (0.2, 0.3, 0.5));

        // (0.6, 0.8) scaled by 1.25 before renormalization.
        let d = [0.0, 0.0, 0.6 * 1.25 - 0.6, 0.8 * 1.25 - 0.8, 0.0];
        let next = step_features(&s, 0.0, &d).unwrap();
        assert!((next.cos_theta - 0.6).abs() < 1e-15);
        assert!((next.sin_theta - 0.8).abs() < 1e-15);

        let d = [0.0, 0.0, -0.6, -0.8, 0.0];
        assert!(matches!(step_features(&s, 0.0, &d), Err(Error::Numeric(_))));
    }

    #[test]
    fn step_backward_matches_differences() {
        let s = features();
        let a = 0.25;
        let d = [0.01, -0.02, 0.03, -0.05, 0.1];
        let g = [0.3, -0.2, 0.9, -1.1, 0.4, 0.5, -0.6, 0.7];
        let (gs, ga, gd) = step_features_backward(&s, &d, &g);
        let f = |s: &FeatureVector, a: f64, d: &[f64; OUTPUT_DIM]| {
            let n = step_features(s, a, d).unwrap().to_array();
            n.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..FEATURE_DIM {
            let mut x = s.to_array();
            x[i] += h;
            let up = f(&FeatureVector::from_array(x), a, &d);
            x[i] -= 2.0 * h;
            let dn = f(&FeatureVector::from_array(x), a, &d);
            assert!((gs[i] - (up - dn) / (2.0 * h)).abs() < 1e-7, "state {i}");
        }
        let fa = (f(&s, a + h, &d) - f(&s, a - h, &d)) / (2.0 * h);
        assert!((ga - fa).abs() < 1e-7);
        for i in 0..OUTPUT_DIM {
            let mut dp = d;
            dp[i] += h;
            let mut dm = d;
            dm[i] -= h;
            assert!((gd[i] - (f(&s, a, &dp) - f(&s, a, &dm)) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn disagreement_arithmetic() {
        let a = TransitionNet::zeros(4, Activation::Tanh);
        let mut b = a.clone();
        b.output_norm.mean[1] = 1.0;
        let same = TransitionEnsemble::new(vec![a.clone(), a.clone()], vec![1, 2]).unwrap();
        assert_eq!(ensemble_disagreement(&same, &features(), 0.0).unwrap(), 0.0);
        let diff = TransitionEnsemble::new(vec![a.clone(), b], vec![1, 2]).unwrap();
        let d = ensemble_disagreement(&diff, &features(), 0.0).unwrap();
        assert!((d - 0.1).abs() < 1e-15);
        let single = TransitionEnsemble::new(vec![a], vec![1]).unwrap();
        assert!(matches!(
            ensemble_disagreement(&single, &features(), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_training_set_is_data_error() {
        let r = train_ensemble_on(&[], 1, &NetTrainConfig::default(), 0, Execution::Sequential);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
