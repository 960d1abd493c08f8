//! Simulation and optimal control of rigid-body systems with inelastic
//! (possibly frictional) impacts, via a clock-state reformulation that
//! replaces velocity jumps with fast auxiliary dynamics in frozen time.

pub mod builtin;
pub mod config;
pub mod diffkit;
pub mod error;
pub mod expr;
pub mod model;
pub mod nlp;
pub mod ocp;
pub mod recover;
pub mod reform;
pub mod sim;

pub use error::{Error, Result};

/// Entrypoint used by the `timefreeze` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    0
}
