mod common;

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use proptest::prelude::*;
use qmoose::circuit::{grad_adjoint, grad_parameter_shift, run_circuit, Circuit, GateKind, GateOp};
use qmoose::statevector::{Axis, StateVector};
use qmoose::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fd_gradient, max_rel_err, random_circuit};

fn random_sequence(state: &mut StateVector, rng: &mut ChaCha8Rng, gates: usize) {
    let n = state.n_qubits();
    for _ in 0..gates {
        if n > 1 && rng.gen_bool(0.25) {
            let c = rng.gen_range(0..n);
            let t = (c + rng.gen_range(1..n)) % n;
            state.apply_cnot(c, t).unwrap();
        } else {
            let axis = [Axis::X, Axis::Y, Axis::Z][rng.gen_range(0..3)];
            state
                .apply_rotation(axis, rng.gen_range(0..n), rng.gen_range(-TAU..TAU))
                .unwrap();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_is_preserved(seed in any::<u64>(), n in 1usize..=8, gates in 0usize..=200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = StateVector::new(n).unwrap();
        random_sequence(&mut s, &mut rng, gates);
        prop_assert!((s.norm() - 1.0).abs() < 1e-10);
        for q in 0..n {
            let z = s.expectation_z(q).unwrap();
            prop_assert!((-1.0..=1.0).contains(&z));
        }
    }

    #[test]
    fn rotation_inverse_restores(seed in any::<u64>(), n in 1usize..=6, q in 0usize..6, angle in -10.0f64..10.0, axis in 0usize..3) {
        let q = q % n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = StateVector::new(n).unwrap();
        random_sequence(&mut s, &mut rng, 30);
        let before = s.clone();
        let axis = [Axis::X, Axis::Y, Axis::Z][axis];
        s.apply_rotation(axis, q, angle).unwrap();
        s.apply_rotation(axis, q, -angle).unwrap();
        for (a, b) in s.amplitudes().iter().zip(before.amplitudes()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn gradient_paths_agree(seed in any::<u64>()) {
        let (c, params) = random_circuit(seed, 6, 2);
        let shift = grad_parameter_shift(&c, &params).unwrap();
        let adjoint = grad_adjoint(&c, &params).unwrap();
        let fd = fd_gradient(|p| run_circuit(&c, p).unwrap(), &params, 1e-5);
        prop_assert!(max_rel_err(&shift, &adjoint) < 1e-6);
        prop_assert!(max_rel_err(&shift, &fd) < 1e-6);
        prop_assert!(max_rel_err(&adjoint, &fd) < 1e-6);
    }

    #[test]
    fn expectation_is_bounded_and_deterministic(seed in any::<u64>()) {
        let (c, params) = random_circuit(seed, 8, 2);
        let a = run_circuit(&c, &params).unwrap();
        let b = run_circuit(&c, &params).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}

#[test]
fn ground_states() {
    let s = StateVector::new(1).unwrap();
    assert_eq!(
        s.amplitudes(),
        &[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
    );
    let s = StateVector::new(3).unwrap();
    assert_eq!(s.amplitudes().len(), 8);
    assert_eq!(s.amplitudes()[0], Complex64::new(1.0, 0.0));
    assert!(matches!(StateVector::new(21), Err(Error::Config(_))));
    assert!(matches!(StateVector::new(0), Err(Error::Config(_))));
}

#[test]
fn rotation_examples() {
    let mut s = StateVector::new(1).unwrap();
    s.apply_rotation(Axis::X, 0, PI).unwrap();
    assert!(s.amplitudes()[0].norm() < 1e-15);
    assert!((s.amplitudes()[1] - Complex64::new(0.0, -1.0)).norm() < 1e-15);

    let mut s = StateVector::new(1).unwrap();
    s.apply_rotation(Axis::X, 0, PI / 2.0).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((s.amplitudes()[0] - Complex64::new(h, 0.0)).norm() < 1e-15);
    assert!((s.amplitudes()[1] - Complex64::new(0.0, -h)).norm() < 1e-15);

    let before = s.clone();
    s.apply_rotation(Axis::X, 0, 0.0).unwrap();
    assert_eq!(s, before);

    assert!(matches!(
        s.apply_rotation(Axis::X, 0, f64::NAN),
        Err(Error::Numeric(_))
    ));
    assert!(matches!(
        s.apply_rotation(Axis::X, 1, 0.1),
        Err(Error::Config(_))
    ));
}

#[test]
fn cnot_examples() {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    // |10⟩ with qubit 0 set is index 1
    let mut s = StateVector::from_amplitudes(vec![zero, one, zero, zero]).unwrap();
    s.apply_cnot(0, 1).unwrap();
    assert_eq!(s.amplitudes()[3], one);

    let mut s = StateVector::new(2).unwrap();
    s.apply_cnot(0, 1).unwrap();
    assert_eq!(s.amplitudes()[0], one);

    let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let mut s = StateVector::from_amplitudes(vec![h, h, zero, zero]).unwrap();
    s.apply_cnot(0, 1).unwrap();
    assert_eq!(s.amplitudes(), &[h, zero, zero, h]);

    assert!(matches!(s.apply_cnot(1, 1), Err(Error::Config(_))));
}

#[test]
fn expectation_examples() {
    let s = StateVector::new(1).unwrap();
    assert_eq!(s.expectation_z(0).unwrap(), 1.0);
    let mut s = StateVector::new(1).unwrap();
    s.apply_rotation(Axis::X, 0, PI).unwrap();
    assert!((s.expectation_z(0).unwrap() + 1.0).abs() < 1e-15);
    let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let s = StateVector::from_amplitudes(vec![h, h]).unwrap();
    assert!(s.expectation_z(0).unwrap().abs() < 1e-15);
}

#[test]
fn single_rx_values() {
    for (theta, want) in [(0.0, 1.0), (PI / 2.0, 0.0), (PI, -1.0)] {
        let mut c = Circuit::new(1, 0).unwrap();
        c.push(GateOp::rotation(GateKind::Rx, 0, theta)).unwrap();
        assert!((run_circuit(&c, &[]).unwrap() - want).abs() < 1e-15);
    }
    let mut c = Circuit::new(1, 1).unwrap();
    c.push(GateOp::trainable(GateKind::Rx, 0, 0, 1.0)).unwrap();
    assert!(matches!(run_circuit(&c, &[]), Err(Error::Config(_))));
    assert!(matches!(
        c.push(GateOp::trainable(GateKind::Rx, 0, 1, 1.0)),
        Err(Error::Config(_))
    ));
}

fn ansatz(n: usize, layers: usize) -> Circuit {
    let mut c = Circuit::new(n, layers * n * 3).unwrap();
    let mut id = 0;
    for _ in 0..layers {
        for q in 0..n {
            c.push(GateOp::rotation(GateKind::Rx, q, 0.3 + 0.1 * q as f64))
                .unwrap();
        }
        for q in 0..n {
            for kind in [GateKind::Rz, GateKind::Ry, GateKind::Rz] {
                c.push(GateOp::trainable(kind, q, id, 1.0)).unwrap();
                id += 1;
            }
        }
        for q in 0..n {
            c.push(GateOp::cnot(q, (q + 1) % n)).unwrap();
        }
    }
    c
}

#[test]
fn full_ansatz_cross_checks() {
    let c = ansatz(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params: Vec<f64> = (0..c.n_params()).map(|_| rng.gen_range(0.0..TAU)).collect();
    let shift = grad_parameter_shift(&c, &params).unwrap();
    let adjoint = grad_adjoint(&c, &params).unwrap();
    for (a, b) in shift.iter().zip(&adjoint) {
        assert!((a - b).abs() < 1e-8);
    }

    let zeros = vec![0.0; c.n_params()];
    let adjoint = grad_adjoint(&c, &zeros).unwrap();
    let fd = fd_gradient(|p| run_circuit(&c, p).unwrap(), &zeros, 1e-5);
    for (a, b) in adjoint.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn three_qubit_twenty_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = Circuit::new(3, 20).unwrap();
    for id in 0..20 {
        let kind = [GateKind::Rx, GateKind::Ry, GateKind::Rz][rng.gen_range(0..3)];
        c.push(GateOp::trainable(kind, id % 3, id, 1.0)).unwrap();
        if id % 4 == 3 {
            c.push(GateOp::cnot(id % 3, (id + 1) % 3)).unwrap();
        }
    }
    let params: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..TAU)).collect();
    let shift = grad_parameter_shift(&c, &params).unwrap();
    let adjoint = grad_adjoint(&c, &params).unwrap();
    let worst = shift
        .iter()
        .zip(&adjoint)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn cnot_with_parameter_is_unsupported() {
    let mut c = Circuit::new(2, 1).unwrap();
    let mut op = GateOp::cnot(0, 1);
    op.param = Some(qmoose::circuit::ParamRef { id: 0, scale: 1.0 });
    assert!(matches!(c.push(op), Err(Error::Unsupported(_))));
}
