//! Simulation of robotic milling with a mechanistic force model, passive
//! variable-stiffness operational-space control, and the learning and
//! optimization tools built on top of it.

// `!(x > 0.0)` is the NaN-rejecting form used in validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cem;
pub mod config;
pub mod control;
pub mod cutting;
pub mod ego;
pub mod env;
pub mod error;
pub mod fit;
pub mod gp;
pub mod path;
pub mod plant;
pub mod policy;
pub mod protocol;
pub mod tool;
pub mod workpiece;

pub use config::ScenarioConfig;
pub use control::{ControllerConfig, OscController};
pub use cutting::MaterialParams;
pub use env::{EnvConfig, Environment, MillingEnv};
pub use error::{Error, Result};
pub use tool::ToolGeometry;
