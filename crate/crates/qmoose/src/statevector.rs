//! Dense statevector simulation for few-qubit circuits.
//!
//! Qubit `q` is bit `q` of the basis-state index, so the ket label `|q0 q1 …⟩`
//! of `|10⟩` is index 1. Rotations follow `R_P(θ) = exp(−iθP/2)`.

use num_complex::Complex64;

use crate::error::{config, numeric, Result};

pub const MAX_QUBITS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// The ground state `|0…0⟩`.
    pub fn new(n_qubits: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&n_qubits) {
            return config(format!("qubit count {n_qubits} outside 1..={MAX_QUBITS}"));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Wraps raw amplitudes. The length must be a power of two; the caller is
    /// responsible for normalization.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return config(format!("amplitude count {len} is not a power of two ≥ 2"));
        }
        let n_qubits = len.trailing_zeros() as usize;
        if n_qubits > MAX_QUBITS {
            return config(format!("qubit count {n_qubits} exceeds {MAX_QUBITS}"));
        }
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|a| a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Resets to `|0…0⟩` without reallocating.
    pub fn reset(&mut self) {
        self.amplitudes.fill(Complex64::new(0.0, 0.0));
        self.amplitudes[0] = Complex64::new(1.0, 0.0);
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits {
            return config(format!(
                "qubit {qubit} out of range for {} qubits",
                self.n_qubits
            ));
        }
        Ok(())
    }

    pub fn apply_rotation(&mut self, axis: Axis, qubit: usize, angle: f64) -> Result<()> {
        self.check_qubit(qubit)?;
        if !angle.is_finite() {
            return numeric(format!("non-finite rotation angle {angle}"));
        }
        self.rotate(axis, qubit, angle);
        Ok(())
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return config(format!("CNOT control and target are both {control}"));
        }
        self.cnot(control, target);
        Ok(())
    }

    /// `⟨Z_qubit⟩`.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(self.z_unchecked(qubit))
    }

    pub(crate) fn z_unchecked(&self, qubit: usize) -> f64 {
        let mask = 1usize << qubit;
        let mut acc = 0.0;
        for (i, a) in self.amplitudes.iter().enumerate() {
            if i & mask == 0 {
                acc += a.norm_sqr();
            } else {
                acc -= a.norm_sqr();
            }
        }
        // Rounding can push a unit-norm state a few ulps past ±1.
        acc.clamp(-1.0, 1.0)
    }

    /// Rotation kernel; indices and angle are assumed valid.
    pub(crate) fn rotate(&mut self, axis: Axis, qubit: usize, angle: f64) {
        let mask = 1usize << qubit;
        let (s, c) = (0.5 * angle).sin_cos();
        let amps = &mut self.amplitudes;
        match axis {
            Axis::X => for_pairs(amps, mask, |a, b| {
                let (x, y) = (*a, *b);
                // c·x − i·s·y and −i·s·x + c·y
                *a = Complex64::new(c * x.re + s * y.im, c * x.im - s * y.re);
                *b = Complex64::new(s * x.im + c * y.re, -s * x.re + c * y.im);
            }),
            Axis::Y => for_pairs(amps, mask, |a, b| {
                let (x, y) = (*a, *b);
                *a = x * c - y * s;
                *b = x * s + y * c;
            }),
            Axis::Z => {
                let lo = Complex64::new(c, -s);
                let hi = Complex64::new(c, s);
                for_pairs(amps, mask, |a, b| {
                    *a *= lo;
                    *b *= hi;
                })
            }
        }
    }

    pub(crate) fn cnot(&mut self, control: usize, target: usize) {
        let cmask = 1usize << control;
        let tmask = 1usize << target;
        for i in 0..self.amplitudes.len() {
            if i & cmask != 0 && i & tmask == 0 {
                self.amplitudes.swap(i, i | tmask);
            }
        }
    }

    /// `self ← P_qubit · self` for a Pauli `P`.
    pub(crate) fn apply_pauli(&mut self, axis: Axis, qubit: usize) {
        let mask = 1usize << qubit;
        let i = Complex64::new(0.0, 1.0);
        match axis {
            Axis::X => for_pairs(&mut self.amplitudes, mask, std::mem::swap),
            Axis::Y => for_pairs(&mut self.amplitudes, mask, |a, b| {
                let (x, y) = (*a, *b);
                *a = -i * y;
                *b = i * x;
            }),
            Axis::Z => for_pairs(&mut self.amplitudes, mask, |_, b| *b = -*b),
        }
    }

    /// `⟨self| P_qubit |other⟩`.
    pub(crate) fn pauli_overlap(&self, axis: Axis, qubit: usize, other: &StateVector) -> Complex64 {
        let mask = 1usize << qubit;
        let l = &self.amplitudes;
        let r = &other.amplitudes;
        let mut acc = Complex64::new(0.0, 0.0);
        let mut block = 0;
        while block < l.len() {
            for lo in block..block + mask {
                let hi = lo | mask;
                let (la, lb) = (l[lo].conj(), l[hi].conj());
                let (ra, rb) = (r[lo], r[hi]);
                acc += match axis {
                    Axis::X => la * rb + lb * ra,
                    // Y|0⟩ = i|1⟩, Y|1⟩ = −i|0⟩
                    Axis::Y => {
                        Complex64::new(0.0, -1.0) * la * rb + Complex64::new(0.0, 1.0) * lb * ra
                    }
                    Axis::Z => la * ra - lb * rb,
                };
            }
            block += mask << 1;
        }
        acc
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub(crate) fn copy_from(&mut self, other: &StateVector) {
        self.amplitudes.copy_from_slice(&other.amplitudes);
    }

    pub(crate) fn fill_zero(&mut self) {
        self.amplitudes.fill(Complex64::new(0.0, 0.0));
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for a in &mut self.amplitudes {
            *a *= k;
        }
    }

    pub(crate) fn add_assign(&mut self, other: &StateVector) {
        for (a, b) in self.amplitudes.iter_mut().zip(&other.amplitudes) {
            *a += b;
        }
    }
}

#[inline(always)]
fn for_pairs(
    amps: &mut [Complex64],
    mask: usize,
    mut f: impl FnMut(&mut Complex64, &mut Complex64),
) {
    let stride = mask << 1;
    for chunk in amps.chunks_exact_mut(stride) {
        let (lo, hi) = chunk.split_at_mut(mask);
        for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
            f(a, b);
        }
    }
}
