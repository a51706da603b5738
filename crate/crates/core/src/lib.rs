//! Federated continual learning for CNN text classifiers.
//!
//! This crate holds the algorithmic core: dense tensors with reverse-mode
//! automatic differentiation, the decomposed classifier (base, mask and
//! task-adaptive filter banks), per-client continual training, and the
//! server-side aggregation and selective-transfer machinery. It is
//! `no_std`-compatible (requires `alloc`); IO, file formats and the CLI
//! live in the companion `fedseit` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod server;
pub mod summary;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use graph::{Gradients, Graph, NodeId};
pub use model::{FilterBanks, ForeignAdapter, Mode, ModelConfig, TaskParams};
pub use server::{AdapterRegistry, GlobalParameter, SitConfig};
pub use summary::TaskSummary;
pub use tensor::Tensor;
pub use train::{ClientState, Example, ObjectiveGrads, RoundReport, TaskData, TrainConfig};
