//! Object-centric scattering fields for tabletop manipulation.
//!
//! The crate provides the full pipeline for pushing tasks on a simulated
//! tabletop: a planar quasi-static physics environment with an analytic
//! ray-traced camera, per-object relightable scattering fields trained
//! against that camera, compositional scene rendering with shadow maps,
//! CMA-ES based inverse pose/light estimation, a graph-network dynamics
//! model over object poses, and an MPPI visual model-predictive controller
//! that closes the loop.
//!
//! Entry points live in [`cli`]; the `osf` binary wraps them. Each module
//! maps to one subsystem and can be used on its own.

pub mod autodiff;
pub mod cli;
pub mod cma;
pub mod compose;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod estimate;
pub mod field;
pub mod geometry;
pub mod img;
pub mod io;
pub mod oracle;
pub mod planner;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

/// Version string stamped into every artifact directory and checkpoint.
pub const VERSION: &str = concat!("osf-", env!("CARGO_PKG_VERSION"));
