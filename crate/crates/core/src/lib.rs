//! Simulation lab for two-level generalization in federated learning.
//!
//! The crate builds superclient/supersample constructions around a FedAvg
//! protocol, evaluates the resulting loss tables, estimates evaluated
//! conditional mutual information with plug-in estimators, and computes
//! generalization bounds that are checked against unbiased gap estimates.

pub mod bounds;
pub mod cli;
pub mod construction;
pub mod error;
pub mod fl;
pub mod harness;
pub mod idx;
pub mod meta;
pub mod mi;
pub mod model;
pub mod seed;
pub mod tables;

pub use error::{Error, Result};
