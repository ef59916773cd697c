//! Dataflow graphs with nonlinear operators, a small training engine that
//! learns crossbar-friendly replacements for the operators an accelerator
//! cannot execute natively, an RRAM tile mapper, and a latency/energy/area
//! model for comparing the resulting configurations.

pub mod cost;
pub mod error;
pub mod graph;
pub mod mapping;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod transform;

pub use error::{Error, Result};
