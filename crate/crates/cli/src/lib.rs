//! Experiment harness around `fedseit-core`: corpus handling, the
//! federated round orchestrator, checkpointing and CSV reporting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod federation;
pub mod report;
