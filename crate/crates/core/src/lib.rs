//! Multi-agent life-cycle pension simulator.
//!
//! Heterogeneous worker agents earn, consume, and allocate savings between a
//! liquid cash buffer and a locked non-liquid pension pot over a monthly
//! life cycle. A shared recurrent actor-critic policy is trained with
//! advantage actor-critic over parallel simulation cohorts.

pub mod analytics;
pub mod config;
pub mod environment;
pub mod error;
pub mod policy;
pub mod population;
pub mod simulate;
pub mod socialgraph;
pub mod training;

pub use error::{SimError, SimResult};
