//! Experiment driver for the basis-projected layer: configs, training,
//! checkpoints and the sub-commands behind the `bpl` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod train;
