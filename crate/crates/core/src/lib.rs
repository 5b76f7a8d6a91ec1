//! Optimal transport, Fokker-Planck semigroups and large-deviation rate
//! functionals on regular 1D and 2D grids.
//!
//! The crate is organized bottom-up: [`grid`] holds the shared types and
//! discrete calculus, [`functionals`] the free energy, Fisher information
//! and weighted `H^-1` norms, [`static_ot`] and [`dynamic_action`] the two
//! faces of the Wasserstein distance, [`semigroup`] the Fokker-Planck
//! evolution, and [`rate_ldp`] combines them into bounds on the rate
//! functional of the empirical process. [`jko`] and [`particles`] are
//! independent discretizations of the same flow, and [`experiments`] is the
//! batch surface used by the `ldpflow` binary.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dynamic_action;
pub mod error;
pub mod experiments;
pub mod functionals;
pub mod grid;
pub mod jko;
pub mod linalg;
pub mod particles;
pub mod rate_ldp;
pub mod semigroup;
pub mod static_ot;

pub use error::{Error, Result};
pub use functionals::Extended;
pub use grid::{AnalyticPotential, EdgeField, Grid, GridDensity, GridSignedMeasure, Potential};
