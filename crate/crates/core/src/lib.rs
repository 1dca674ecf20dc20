//! Residual power flow.
//!
//! Steady-state power flow posed as a least-squares problem over Kirchhoff
//! residuals, with every grid component modelled as a current injection in
//! its own local frame. Build a [`network::Network`], then evaluate
//! [`residual`]s, solve them with [`rpf_solver`], generate training data with
//! [`dataset`], fit [`neural_solver`]s and run [`po`] tasks on top.

// Range checks are written as `!(x >= lo)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod csvio;
pub mod dataset;
pub mod error;
pub mod injectors;
pub mod network;
pub mod neural_solver;
pub mod po;
pub mod residual;
pub mod rpf_solver;
pub mod state;
pub mod stats;

pub use error::{Error, Result};
