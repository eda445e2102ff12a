//! Quantum-policy model-based offline RL for cart-pole swing-up.
//!
//! A statevector simulator backs a variational-circuit policy that is trained
//! by backpropagating through an ensemble of learned transition models.

pub mod circuit;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod statevector;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use exec::Execution;
