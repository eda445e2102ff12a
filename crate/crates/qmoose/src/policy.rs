//! The variational-circuit policy.
//!
//! Each layer encodes the normalized features with `RX(w·x)` rotations
//! (every layer when data re-uploading is on, otherwise only the first),
//! applies `RZ(θ) RY(φ) RZ(δ)` to every qubit and closes with a ring of
//! CNOTs. The action is `w_out · ⟨Z⟩`.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{AdjointWorkspace, Circuit, GateKind, GateOp};
use crate::error::{config, numeric, Error, Result};
use crate::world::PhysicalState;

pub const FEATURE_DIM: usize = 8;

/// Policy input: the most recent physical state plus the three previous
/// actions, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub p: f64,
    pub p_dot: f64,
    pub cos_theta: f64,
    pub sin_theta: f64,
    pub theta_dot: f64,
    pub a_prev3: f64,
    pub a_prev2: f64,
    pub a_prev1: f64,
}

impl FeatureVector {
    pub fn from_array(v: [f64; FEATURE_DIM]) -> Self {
        Self {
            p: v[0],
            p_dot: v[1],
            cos_theta: v[2],
            sin_theta: v[3],
            theta_dot: v[4],
            a_prev3: v[5],
            a_prev2: v[6],
            a_prev1: v[7],
        }
    }

    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.p,
            self.p_dot,
            self.cos_theta,
            self.sin_theta,
            self.theta_dot,
            self.a_prev3,
            self.a_prev2,
            self.a_prev1,
        ]
    }

    /// `history` is `(a_{t−3}, a_{t−2}, a_{t−1})`.
    pub fn from_physical(state: &PhysicalState, history: [f64; 3]) -> Self {
        let (s, c) = state.theta.sin_cos();
        Self {
            p: state.p,
            p_dot: state.p_dot,
            cos_theta: c,
            sin_theta: s,
            theta_dot: state.theta_dot,
            a_prev3: history[0],
            a_prev2: history[1],
            a_prev1: history[2],
        }
    }

    /// Pole angle recovered from the (cos, sin) embedding.
    pub fn theta(&self) -> f64 {
        self.sin_theta.atan2(self.cos_theta)
    }

    pub fn to_physical(&self) -> PhysicalState {
        PhysicalState {
            p: self.p,
            p_dot: self.p_dot,
            theta: self.theta(),
            theta_dot: self.theta_dot,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Per-component scale used before encoding. Cos/sin need no bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub position: f64,
    pub velocity: f64,
    pub angular_velocity: f64,
    pub action: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            position: 2.4,
            velocity: 3.0,
            angular_velocity: TAU,
            action: 1.0,
        }
    }
}

impl NormalizationSpec {
    fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("position", self.position),
            ("velocity", self.velocity),
            ("angular_velocity", self.angular_velocity),
            ("action", self.action),
        ] {
            if !(b.is_finite() && b > 0.0) {
                return config(format!(
                    "normalization bound {name} must be positive, got {b}"
                ));
            }
        }
        Ok(())
    }

    /// Bound per feature slot; `None` for the pass-through cos/sin slots.
    fn bounds(&self) -> [Option<f64>; FEATURE_DIM] {
        [
            Some(self.position),
            Some(self.velocity),
            None,
            None,
            Some(self.angular_velocity),
            Some(self.action),
            Some(self.action),
            Some(self.action),
        ]
    }
}

/// `x → clamp(π·x/bound, −π, π)`; cos/sin pass through.
pub fn normalize_features(
    raw: &FeatureVector,
    bounds: &NormalizationSpec,
) -> Result<FeatureVector> {
    bounds.validate()?;
    Ok(FeatureVector::from_array(
        normalize_with_slope(raw, bounds).0,
    ))
}

/// Normalized features and `d normalized / d raw` per slot (zero where clamped).
fn normalize_with_slope(
    raw: &FeatureVector,
    bounds: &NormalizationSpec,
) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
    let x = raw.to_array();
    let mut out = [0.0; FEATURE_DIM];
    let mut slope = [0.0; FEATURE_DIM];
    for (j, b) in bounds.bounds().iter().enumerate() {
        match b {
            Some(b) => {
                let k = PI / b;
                let v = k * x[j];
                if v > PI {
                    out[j] = PI;
                } else if v < -PI {
                    out[j] = -PI;
                } else {
                    out[j] = v;
                    slope[j] = k;
                }
            }
            None => {
                out[j] = x[j];
                slope[j] = 1.0;
            }
        }
    }
    (out, slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub data_reuploading: bool,
    pub trainable_input_weights: bool,
    pub trainable_output_weight: bool,
    pub input_weights_per_layer: bool,
    pub observable_qubits: Vec<usize>,
    /// Symmetric action clamp; 0 disables it.
    pub action_clip: f64,
    pub normalization: NormalizationSpec,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_qubits: FEATURE_DIM,
            n_layers: 2,
            data_reuploading: true,
            trainable_input_weights: true,
            trainable_output_weight: true,
            input_weights_per_layer: true,
            observable_qubits: vec![0],
            action_clip: 1.0,
            normalization: NormalizationSpec::default(),
        }
    }
}

impl PolicyConfig {
    /// Plain VQC without trainable input/output scaling.
    pub fn without_trainable_weights(mut self) -> Self {
        self.trainable_input_weights = false;
        self.trainable_output_weight = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > FEATURE_DIM {
            return config(format!(
                "n_qubits must be in 1..={FEATURE_DIM}, got {}",
                self.n_qubits
            ));
        }
        if self.n_layers == 0 {
            return config("n_layers must be at least 1");
        }
        if self.observable_qubits.is_empty()
            || self.observable_qubits.iter().any(|&q| q >= self.n_qubits)
        {
            return config(format!(
                "invalid observable qubits {:?}",
                self.observable_qubits
            ));
        }
        if !(self.action_clip >= 0.0 && self.action_clip.is_finite()) {
            return config(format!("action_clip must be ≥ 0, got {}", self.action_clip));
        }
        self.normalization.validate()
    }

    pub fn input_weight_rows(&self) -> usize {
        if self.data_reuploading && self.input_weights_per_layer {
            self.n_layers
        } else {
            1
        }
    }

    pub fn n_input_weights(&self) -> usize {
        self.input_weight_rows() * FEATURE_DIM
    }

    pub fn n_variational(&self) -> usize {
        self.n_layers * self.n_qubits * 3
    }

    /// Total parameter count, frozen groups included.
    pub fn n_params(&self) -> usize {
        self.n_input_weights() + self.n_variational() + 1
    }

    /// Which flat parameters the optimizer may move.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![self.trainable_input_weights; self.n_input_weights()];
        mask.extend(std::iter::repeat_n(true, self.n_variational()));
        mask.push(self.trainable_output_weight);
        mask
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable_mask().iter().filter(|&&t| t).count()
    }

    fn encodes_in_layer(&self, layer: usize) -> bool {
        layer == 0 || self.data_reuploading
    }

    fn weight_row(&self, layer: usize) -> usize {
        if self.input_weight_rows() == 1 {
            0
        } else {
            layer
        }
    }
}

/// All trainable quantities of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `[rows × 8]` row-major; rows is `n_layers` with per-layer weights and
    /// re-uploading, otherwise 1.
    pub input_weights: Vec<f64>,
    /// `[n_layers × n_qubits × 3]` row-major angles `(θ, φ, δ)`.
    pub variational: Vec<f64>,
    pub output_weight: f64,
}

impl PolicyParams {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_weights.len() + self.variational.len() + 1);
        v.extend_from_slice(&self.input_weights);
        v.extend_from_slice(&self.variational);
        v.push(self.output_weight);
        v
    }

    pub fn from_flat(config: &PolicyConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.n_params() {
            return config_err_len(config.n_params(), flat.len());
        }
        let ni = config.n_input_weights();
        let nv = config.n_variational();
        Ok(Self {
            input_weights: flat[..ni].to_vec(),
            variational: flat[ni..ni + nv].to_vec(),
            output_weight: flat[ni + nv],
        })
    }

    pub fn check(&self, config: &PolicyConfig) -> Result<()> {
        if self.input_weights.len() != config.n_input_weights()
            || self.variational.len() != config.n_variational()
        {
            return config_err_len(
                config.n_params(),
                self.input_weights.len() + self.variational.len() + 1,
            );
        }
        if !self.to_flat().iter().all(|x| x.is_finite()) {
            return numeric("policy parameters contain non-finite values");
        }
        Ok(())
    }
}

fn config_err_len<T>(expected: usize, got: usize) -> Result<T> {
    config(format!("expected {expected} policy parameters, got {got}"))
}

/// Fresh parameters: angles uniform in `[0, 2π)`, all weights 1.
pub fn init_policy(config: &PolicyConfig, seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variational = (0..config.n_variational())
        .map(|_| rng.gen_range(0.0..TAU))
        .collect();
    PolicyParams {
        input_weights: vec![1.0; config.n_input_weights()],
        variational,
        output_weight: 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpRole {
    /// `RX(w·x_feature)` where `w` is flat parameter `weight`.
    Encode {
        feature: usize,
        weight: usize,
    },
    Variational,
    Entangle,
}

/// Builds the circuit for already-normalized features. The circuit's
/// parameter vector is the flat [`PolicyParams`] layout.
pub fn build_circuit(
    config: &PolicyConfig,
    features: &FeatureVector,
    params: &PolicyParams,
) -> Result<Circuit> {
    config.validate()?;
    params.check(config)?;
    Ok(build_with_roles(config, &features.to_array())?.0)
}

fn build_with_roles(
    config: &PolicyConfig,
    x: &[f64; FEATURE_DIM],
) -> Result<(Circuit, Vec<OpRole>)> {
    let n = config.n_qubits;
    let ni = config.n_input_weights();
    let per_layer_ops = 3 * n + if n > 1 { n } else { 0 };
    let capacity = config.n_layers * (per_layer_ops + FEATURE_DIM);
    let mut circuit = Circuit::with_capacity(n, config.n_params(), capacity)?;
    let mut roles = Vec::with_capacity(capacity);

    for layer in 0..config.n_layers {
        if config.encodes_in_layer(layer) {
            let row = config.weight_row(layer);
            for (feature, &value) in x.iter().enumerate() {
                let weight = row * FEATURE_DIM + feature;
                circuit.push(GateOp::trainable(GateKind::Rx, feature % n, weight, value))?;
                roles.push(OpRole::Encode { feature, weight });
            }
        }
        for q in 0..n {
            let base = ni + (layer * n + q) * 3;
            circuit.push(GateOp::trainable(GateKind::Rz, q, base, 1.0))?;
            circuit.push(GateOp::trainable(GateKind::Ry, q, base + 1, 1.0))?;
            circuit.push(GateOp::trainable(GateKind::Rz, q, base + 2, 1.0))?;
            roles.extend([OpRole::Variational; 3]);
        }
        if n > 1 {
            for q in 0..n {
                circuit.push(GateOp::cnot(q, (q + 1) % n))?;
                roles.push(OpRole::Entangle);
            }
        }
    }
    circuit.set_observable(config.observable_qubits.clone())?;
    Ok((circuit, roles))
}

fn check_features(raw: &FeatureVector) -> Result<()> {
    if !raw.is_finite() {
        return numeric(format!("non-finite feature in {raw:?}"));
    }
    Ok(())
}

fn clip(config: &PolicyConfig, unclipped: f64) -> (f64, bool) {
    let c = config.action_clip;
    if c > 0.0 && unclipped.abs() > c {
        (unclipped.signum() * c, true)
    } else {
        (unclipped, false)
    }
}

/// Action for raw (un-normalized) features.
pub fn act(config: &PolicyConfig, params: &PolicyParams, features: &FeatureVector) -> Result<f64> {
    config.validate()?;
    params.check(config)?;
    check_features(features)?;
    let (x, _) = normalize_with_slope(features, &config.normalization);
    let (circuit, _) = build_with_roles(config, &x)?;
    let z = circuit.run(&params.to_flat())?;
    Ok(clip(config, params.output_weight * z).0)
}

/// `∂action/∂params`, split by group. Frozen groups are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub d_input_weights: Vec<f64>,
    pub d_variational: Vec<f64>,
    pub d_output_weight: f64,
}

impl PolicyGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.d_input_weights.clone();
        v.extend_from_slice(&self.d_variational);
        v.push(self.d_output_weight);
        v
    }
}

pub fn policy_gradient(
    config: &PolicyConfig,
    params: &PolicyParams,
    features: &FeatureVector,
) -> Result<PolicyGradient> {
    let mut eval = PolicyEvaluator::new(config, params)?;
    let out = eval.evaluate(features)?;
    let ni = config.n_input_weights();
    let nv = config.n_variational();
    Ok(PolicyGradient {
        d_input_weights: out.d_params[..ni].to_vec(),
        d_variational: out.d_params[ni..ni + nv].to_vec(),
        d_output_weight: out.d_params[ni + nv],
    })
}

/// Action together with its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionJacobian {
    pub action: f64,
    pub expectation: f64,
    pub clipped: bool,
    /// `∂action/∂params` in flat layout, zero on frozen groups.
    pub d_params: Vec<f64>,
    /// `∂action/∂raw features`.
    pub d_features: [f64; FEATURE_DIM],
}

/// Validated policy with reusable simulation buffers, for hot loops.
#[derive(Debug, Clone)]
pub struct PolicyEvaluator<'a> {
    config: &'a PolicyConfig,
    params: &'a PolicyParams,
    flat: Vec<f64>,
    mask: Vec<bool>,
    ws: AdjointWorkspace,
    per_op: Vec<f64>,
}

impl<'a> PolicyEvaluator<'a> {
    pub fn new(config: &'a PolicyConfig, params: &'a PolicyParams) -> Result<Self> {
        config.validate()?;
        params.check(config)?;
        Ok(Self {
            config,
            params,
            flat: params.to_flat(),
            mask: config.trainable_mask(),
            ws: AdjointWorkspace::new(config.n_qubits)?,
            per_op: Vec::new(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.flat.len()
    }

    pub fn action(&mut self, features: &FeatureVector) -> Result<f64> {
        check_features(features)?;
        let (x, _) = normalize_with_slope(features, &self.config.normalization);
        let (circuit, _) = build_with_roles(self.config, &x)?;
        let z = circuit.run(&self.flat)?;
        Ok(clip(self.config, self.params.output_weight * z).0)
    }

    pub fn evaluate(&mut self, features: &FeatureVector) -> Result<ActionJacobian> {
        check_features(features)?;
        let (x, slope) = normalize_with_slope(features, &self.config.normalization);
        let (circuit, roles) = build_with_roles(self.config, &x)?;
        self.per_op.resize(circuit.ops().len(), 0.0);
        let z = circuit.adjoint_into(&self.flat, &mut self.ws, &mut self.per_op);

        let w_out = self.params.output_weight;
        let (action, clipped) = clip(self.config, w_out * z);
        let mut d_params = vec![0.0; self.config.n_params()];
        let mut d_features = [0.0; FEATURE_DIM];
        if !clipped {
            for ((op, role), &g) in circuit.ops().iter().zip(&roles).zip(&self.per_op) {
                match *role {
                    OpRole::Encode { feature, weight } => {
                        d_params[weight] += w_out * g * x[feature];
                        d_features[feature] += w_out * g * self.flat[weight] * slope[feature];
                    }
                    OpRole::Variational => {
                        if let Some(p) = op.param {
                            d_params[p.id] += w_out * g;
                        }
                    }
                    OpRole::Entangle => {}
                }
            }
            let last = d_params.len() - 1;
            d_params[last] = z;
            for (d, &trainable) in d_params.iter_mut().zip(&self.mask) {
                if !trainable {
                    *d = 0.0;
                }
            }
        }
        Ok(ActionJacobian {
            action,
            expectation: z,
            clipped,
            d_params,
            d_features,
        })
    }
}

/// Configuration and parameters bundled for evaluation and checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct VqcPolicy {
    pub config: PolicyConfig,
    pub params: PolicyParams,
}

impl VqcPolicy {
    pub fn new(config: PolicyConfig, params: PolicyParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    pub fn act(&self, features: &FeatureVector) -> Result<f64> {
        act(&self.config, &self.params, features)
    }
}

pub const CHECKPOINT_FORMAT: &str = "qmoose-policy/1";

/// On-disk policy document. Arrays are row-major with explicit shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub config: PolicyConfig,
    pub input_weights_shape: [usize; 2],
    pub input_weights: Vec<f64>,
    pub variational_shape: [usize; 3],
    pub variational: Vec<f64>,
    pub output_weight: f64,
    pub seed: u64,
    pub step: usize,
}

impl PolicyCheckpoint {
    pub fn new(policy: &VqcPolicy, seed: u64, step: usize) -> Self {
        let c = &policy.config;
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: c.clone(),
            input_weights_shape: [c.input_weight_rows(), FEATURE_DIM],
            input_weights: policy.params.input_weights.clone(),
            variational_shape: [c.n_layers, c.n_qubits, 3],
            variational: policy.params.variational.clone(),
            output_weight: policy.params.output_weight,
            seed,
            step,
        }
    }

    pub fn into_policy(self) -> Result<VqcPolicy> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unknown policy format {:?}",
                self.format
            )));
        }
        VqcPolicy::new(
            self.config,
            PolicyParams {
                input_weights: self.input_weights,
                variational: self.variational,
                output_weight: self.output_weight,
            },
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
