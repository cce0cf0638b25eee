//! Divide-and-conquer symbolic regression: multi-gene genetic programming
//! with one population per physical mechanism, fused by an elastic-net
//! ensemble and coupled through periodic feature abstraction.

pub mod ahsam;
pub mod analysis;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evolution;
pub mod experiment;
pub mod exprtree;
pub mod linfit;

pub use error::{Error, Result};
