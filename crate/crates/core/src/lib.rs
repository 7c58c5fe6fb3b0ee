//! Gradient-norm and kernel distributionally robust constraint tightening,
//! with a scenario-based stochastic tube MPC harness on top.

pub mod ambiguity;
pub mod constraints;
pub mod error;
pub mod kernel;
pub mod mpc;
pub mod nlp;
pub mod selftest;
pub mod sim;
pub mod svm;

pub use error::{Error, Result};
