//! Parameterized circuits over {RX, RY, RZ, CNOT} with Z-basis readout and
//! two independent gradient routes.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::statevector::{Axis, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    Cnot,
}

impl GateKind {
    fn axis(self) -> Option<Axis> {
        match self {
            GateKind::Rx => Some(Axis::X),
            GateKind::Ry => Some(Axis::Y),
            GateKind::Rz => Some(Axis::Z),
            GateKind::Cnot => None,
        }
    }
}

/// Trainable angle source: the gate angle gains `scale · params[id]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRef {
    pub id: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOp {
    pub kind: GateKind,
    pub target: usize,
    pub control: Option<usize>,
    /// Fixed angle (rotations), or offset added to the trainable part.
    pub angle: f64,
    pub param: Option<ParamRef>,
}

impl GateOp {
    pub fn rotation(kind: GateKind, target: usize, angle: f64) -> Self {
        Self {
            kind,
            target,
            control: None,
            angle,
            param: None,
        }
    }

    /// Rotation whose angle is `scale · params[id]`.
    pub fn trainable(kind: GateKind, target: usize, id: usize, scale: f64) -> Self {
        Self {
            kind,
            target,
            control: None,
            angle: 0.0,
            param: Some(ParamRef { id, scale }),
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Self {
            kind: GateKind::Cnot,
            target,
            control: Some(control),
            angle: 0.0,
            param: None,
        }
    }

    #[inline]
    fn resolved_angle(&self, params: &[f64]) -> f64 {
        match self.param {
            Some(p) => self.angle + p.scale * params[p.id],
            None => self.angle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    n_qubits: usize,
    n_params: usize,
    ops: Vec<GateOp>,
    observable: Vec<usize>,
}

impl Circuit {
    /// Empty circuit measuring `⟨Z_0⟩`.
    pub fn new(n_qubits: usize, n_params: usize) -> Result<Self> {
        if !(1..=crate::statevector::MAX_QUBITS).contains(&n_qubits) {
            return config(format!("qubit count {n_qubits} out of range"));
        }
        Ok(Self {
            n_qubits,
            n_params,
            ops: Vec::new(),
            observable: vec![0],
        })
    }

    pub fn with_capacity(n_qubits: usize, n_params: usize, ops: usize) -> Result<Self> {
        let mut c = Self::new(n_qubits, n_params)?;
        c.ops.reserve(ops);
        Ok(c)
    }

    pub fn push(&mut self, op: GateOp) -> Result<()> {
        if op.target >= self.n_qubits {
            return config(format!("target {} out of range", op.target));
        }
        match (op.kind, op.control) {
            (GateKind::Cnot, Some(ctl)) => {
                if ctl >= self.n_qubits || ctl == op.target {
                    return config(format!("bad CNOT control {ctl} for target {}", op.target));
                }
                if op.param.is_some() {
                    return Err(Error::Unsupported(
                        "CNOT cannot carry a trainable parameter".into(),
                    ));
                }
            }
            (GateKind::Cnot, None) => return config("CNOT without control"),
            (_, Some(_)) => return config("rotation with a control qubit"),
            (_, None) => {
                if !op.angle.is_finite() {
                    return Err(Error::Numeric(format!("non-finite angle {}", op.angle)));
                }
                if let Some(p) = op.param {
                    if p.id >= self.n_params {
                        return config(format!(
                            "param id {} not below declared count {}",
                            p.id, self.n_params
                        ));
                    }
                }
            }
        }
        self.ops.push(op);
        Ok(())
    }

    pub fn set_observable(&mut self, qubits: Vec<usize>) -> Result<()> {
        if qubits.is_empty() || qubits.iter().any(|&q| q >= self.n_qubits) {
            return config(format!("invalid observable {qubits:?}"));
        }
        self.observable = qubits;
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn ops(&self) -> &[GateOp] {
        &self.ops
    }

    pub fn observable(&self) -> &[usize] {
        &self.observable
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() < self.n_params {
            return config(format!(
                "{} parameter values supplied, circuit references {}",
                params.len(),
                self.n_params
            ));
        }
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter {bad}")));
        }
        Ok(())
    }

    fn prepare(&self, state: &mut StateVector, params: &[f64], shift: Option<(usize, f64)>) {
        state.reset();
        for (idx, op) in self.ops.iter().enumerate() {
            match op.kind.axis() {
                Some(axis) => {
                    let mut angle = op.resolved_angle(params);
                    if let Some((at, delta)) = shift {
                        if at == idx {
                            angle += delta;
                        }
                    }
                    state.rotate(axis, op.target, angle);
                }
                None => state.cnot(op.control.unwrap_or_default(), op.target),
            }
        }
    }

    fn observe(&self, state: &StateVector) -> f64 {
        let sum: f64 = self.observable.iter().map(|&q| state.z_unchecked(q)).sum();
        sum / self.observable.len() as f64
    }

    /// Final state after all gates.
    pub fn final_state(&self, params: &[f64]) -> Result<StateVector> {
        self.check_params(params)?;
        let mut state = StateVector::new(self.n_qubits)?;
        self.prepare(&mut state, params, None);
        Ok(state)
    }

    /// Expectation of the observable: mean of single-qubit `⟨Z⟩` values.
    pub fn run(&self, params: &[f64]) -> Result<f64> {
        let state = self.final_state(params)?;
        Ok(self.observe(&state))
    }

    /// Gradient by the two-term shift rule, one pair of evaluations per
    /// trainable gate, accumulated per parameter id.
    pub fn grad_parameter_shift(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut grad = vec![0.0; self.n_params];
        let mut state = StateVector::new(self.n_qubits)?;
        for (idx, op) in self.ops.iter().enumerate() {
            let Some(p) = op.param else { continue };
            self.prepare(&mut state, params, Some((idx, FRAC_PI_2)));
            let plus = self.observe(&state);
            self.prepare(&mut state, params, Some((idx, -FRAC_PI_2)));
            let minus = self.observe(&state);
            grad[p.id] += p.scale * 0.5 * (plus - minus);
        }
        Ok(grad)
    }

    /// Gradient from one forward and one backward statevector sweep.
    pub fn grad_adjoint(&self, params: &[f64]) -> Result<Vec<f64>> {
        let (_, per_op) = self.adjoint_angle_gradients(params)?;
        let mut grad = vec![0.0; self.n_params];
        for (op, d) in self.ops.iter().zip(&per_op) {
            if let Some(p) = op.param {
                grad[p.id] += p.scale * d;
            }
        }
        Ok(grad)
    }

    /// Expectation plus `∂⟨O⟩/∂angle` for every op (zero for CNOTs).
    pub fn adjoint_angle_gradients(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let mut ws = AdjointWorkspace::new(self.n_qubits)?;
        let mut out = vec![0.0; self.ops.len()];
        let value = self.adjoint_into(params, &mut ws, &mut out);
        Ok((value, out))
    }

    /// Allocation-free adjoint sweep for hot loops. `params` must already be
    /// validated against this circuit.
    pub(crate) fn adjoint_into(
        &self,
        params: &[f64],
        ws: &mut AdjointWorkspace,
        out: &mut [f64],
    ) -> f64 {
        let AdjointWorkspace { psi, lambda, tmp } = ws;
        self.prepare(psi, params, None);
        let value = self.observe(psi);

        // λ = O ψ
        let m = self.observable.len() as f64;
        if self.observable.len() == 1 {
            lambda.copy_from(psi);
            lambda.apply_pauli(Axis::Z, self.observable[0]);
        } else {
            lambda.fill_zero();
            for &q in &self.observable {
                tmp.copy_from(psi);
                tmp.apply_pauli(Axis::Z, q);
                lambda.add_assign(tmp);
            }
            lambda.scale(1.0 / m);
        }

        for (idx, op) in self.ops.iter().enumerate().rev() {
            match op.kind.axis() {
                Some(axis) => {
                    // d/dθ ⟨ψ|O|ψ⟩ = 2 Re⟨λ|(−i/2) P ψ_l⟩ = Im⟨λ|P|ψ_l⟩
                    out[idx] = lambda.pauli_overlap(axis, op.target, psi).im;
                    let angle = op.resolved_angle(params);
                    psi.rotate(axis, op.target, -angle);
                    lambda.rotate(axis, op.target, -angle);
                }
                None => {
                    out[idx] = 0.0;
                    let ctl = op.control.unwrap_or_default();
                    psi.cnot(ctl, op.target);
                    lambda.cnot(ctl, op.target);
                }
            }
        }
        value
    }
}

/// Reusable buffers for [`Circuit::adjoint_into`].
#[derive(Debug, Clone)]
pub struct AdjointWorkspace {
    psi: StateVector,
    lambda: StateVector,
    tmp: StateVector,
}

impl AdjointWorkspace {
    pub fn new(n_qubits: usize) -> Result<Self> {
        let s = StateVector::new(n_qubits)?;
        Ok(Self {
            psi: s.clone(),
            lambda: s.clone(),
            tmp: s,
        })
    }
}

/// Free-function form of [`Circuit::run`].
pub fn run_circuit(circuit: &Circuit, params: &[f64]) -> Result<f64> {
    circuit.run(params)
}

pub fn grad_parameter_shift(circuit: &Circuit, params: &[f64]) -> Result<Vec<f64>> {
    circuit.grad_parameter_shift(params)
}

pub fn grad_adjoint(circuit: &Circuit, params: &[f64]) -> Result<Vec<f64>> {
    circuit.grad_adjoint(params)
}
