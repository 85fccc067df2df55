//! Constant-time activation functions for embedded inference, with the
//! tooling to check them: an operation-trace oracle, an accuracy analysis and
//! a simulator for the desynchronization countermeasure and the template
//! attack that defeats it.
//!
//! All protected activations share one rational `tanh` core
//! ([`pade_core::r_tanh`]), saturate through branchless masked selects
//! ([`ct_select`]) and execute the same number of abstract operations for
//! every finite input.

pub mod activations;
pub mod attack;
pub mod ct_select;
pub mod error_analysis;
pub mod grid;
pub mod machine;
pub mod pade_core;
pub mod timing_harness;

pub use activations::{eval, ActivationKind, Thresholds};
pub use grid::Grid;
