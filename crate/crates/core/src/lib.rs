//! Simulation and numerical verification toolkit for a one-dimensional test
//! particle in a periodic potential driven by elastic collisions with an
//! ideal-gas thermostat.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod error;
pub mod flow;
pub mod io;
pub mod level_curves;
pub mod model;
pub mod process;
pub mod quad;
pub mod resolvent_grid;
pub mod resolvent_mc;
pub mod sampling;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use model::*;
