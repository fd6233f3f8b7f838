//! Model-predictive pursuit of a ground vehicle by a linearized quadcopter.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod evader;
pub mod lp;
pub mod mpc;
pub mod polytope;
pub mod prediction;
pub mod qp;
pub mod reach;
pub mod reference;
pub mod sim;
pub mod terminal;
pub mod verify;

pub use error::{Error, Result};
