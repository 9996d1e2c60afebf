//! Online continual learning workbench.
//!
//! Builds synthetic non-stationary labeled streams, runs the test-then-train
//! protocol over them with experience replay, and evaluates learning efficacy
//! (average online accuracy) alongside information retention (backward and
//! forward transfer from frozen checkpoints). Includes the PoLRS population
//! learning-rate controller, the ADRep adaptive replay-capacity controller,
//! and a quadtree geocell partitioner for converting geotagged points into
//! count-bounded class labels.

pub mod config;
pub mod error;
pub mod geocells;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod replay;
pub mod schedule;
pub mod stream;

pub use error::{OclError, Result};
