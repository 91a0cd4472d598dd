//! Verification of first- and second-order optimality conditions for
//! state-constrained optimal control of Volterra integral equations.

pub mod adjoint;
pub mod bv;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod lp;
pub mod multipliers;
pub mod problem;
pub mod registry;
pub mod second_order;
pub mod structure;
pub mod synthesis;

pub use error::{Error, Result};
