//! Structured pruning of small decoder-only transformers with a
//! sparsity-level database and training-aware evolutionary search over
//! per-module sparsity levels.
//!
//! The pipeline is: [`pruner`] builds per-module OBS pruning paths,
//! [`leveldb`] snapshots them into a level database, [`evosearch`] mutates
//! level assignments and selects offspring by [`fitness`] (KL to the dense
//! model) after short [`finetune`] runs.

pub mod calibration;
pub mod error;
pub mod evosearch;
pub mod finetune;
pub mod fitness;
pub mod io;
pub mod leveldb;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod pruner;

pub use error::{Error, ErrorCategory, Result};
pub use leveldb::{LevelAssignment, LevelDatabase, LevelSpec};
pub use model::{ModelConfig, ModelParams, ModuleId, ModuleKind};
pub use numerics::Matrix;
