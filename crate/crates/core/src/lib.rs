//! Transfer-tensor analysis of memory effects in open-system dynamics and
//! in the multi-time statistics of sequential measurements.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense complex linear algebra and tensor-product bookkeeping.
//! - [`model`]: the spin-boson composite system, its propagator, POVMs and
//!   global states.
//! - [`maps`]: superoperators, Choi matrices, CPTP tests, reduced dynamical
//!   maps and the conditional `Γ` maps.
//! - [`tt`]: the unconditional transfer-tensor hierarchy and divisibility.
//! - [`stochastic`]: outcome-conditioned dynamics, stochastic transfer
//!   tensors and memory quantifiers.
//! - [`dephasing`]: closed-form pure-dephasing family.
//! - [`experiments`]: configuration, orchestration and CSV output.

pub mod dephasing;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod maps;
pub mod model;
pub mod stochastic;
pub mod tt;

pub use error::{Error, Result};
