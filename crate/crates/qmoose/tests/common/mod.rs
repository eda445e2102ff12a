#![allow(dead_code)]

use std::f64::consts::TAU;

use qmoose::circuit::{Circuit, GateKind, GateOp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROTATIONS: [GateKind; 3] = [GateKind::Rx, GateKind::Ry, GateKind::Rz];

/// Layered circuit on at most `max_qubits` qubits: fixed encoding rotations,
/// three trainable rotations per qubit (ids may be shared, scales vary) and
/// a CNOT ring per layer. Returns the circuit and random parameters.
pub fn random_circuit(seed: u64, max_qubits: usize, max_layers: usize) -> (Circuit, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_qubits);
    let layers = rng.gen_range(1..=max_layers);
    let slots = layers * n * 3;
    let n_params = rng.gen_range(1..=slots);
    let mut c = Circuit::new(n, n_params).unwrap();
    for _ in 0..layers {
        for q in 0..n {
            let kind = ROTATIONS[rng.gen_range(0..3)];
            c.push(GateOp::rotation(kind, q, rng.gen_range(-3.0..3.0)))
                .unwrap();
        }
        for q in 0..n {
            for _ in 0..3 {
                let kind = ROTATIONS[rng.gen_range(0..3)];
                let id = rng.gen_range(0..n_params);
                let scale = rng.gen_range(-2.0..2.0);
                c.push(GateOp::trainable(kind, q, id, scale)).unwrap();
            }
        }
        if n > 1 {
            for q in 0..n {
                c.push(GateOp::cnot(q, (q + 1) % n)).unwrap();
            }
        }
    }
    let mut observable = vec![0];
    if n > 1 && rng.gen_bool(0.3) {
        observable.push(n - 1);
    }
    c.set_observable(observable).unwrap();
    let params = (0..n_params).map(|_| rng.gen_range(0.0..TAU)).collect();
    (c, params)
}

/// Central finite differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| ≤ tol · max(1, |a|, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
