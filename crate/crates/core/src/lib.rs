//! Cycle-level simulator of a multi-core AI accelerator with a tensor-aware
//! shared last-level cache, and an analytical model of its performance.
//!
//! Pipeline: [`tracegen`] turns a dataflow into per-core instruction streams
//! and TMU registrations; [`sim`] runs them through [`cores`], the sliced
//! [`llc`] with its [`tmu`] and [`policy`] hooks, and [`dram`]; [`analytic`]
//! predicts the same runs in closed form; [`harness`] drives sweeps.

pub mod addr;
pub mod analytic;
pub mod config;
pub mod cores;
pub mod dram;
pub mod error;
pub mod harness;
pub mod llc;
pub mod policy;
pub mod sim;
#[cfg(test)]
mod testbench;
pub mod tmu;
pub mod tracegen;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use sim::RunResult;
