//! Standard-library companion to `evonet-core`: file formats, the CIFAR-10
//! loader, training checkpoints, on-disk evolution runs with resume,
//! parallel and wall-clock evaluation, plotting and the `evonet` command.

pub mod budget;
pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod genome_io;
pub mod parallel;
pub mod plot;
pub mod run;
pub mod runlog;

pub use error::{Error, Result};
