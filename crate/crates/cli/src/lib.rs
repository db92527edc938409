//! Experiment runner for the `tail2learn` crate: config loading, run
//! directories and the table writers behind the `t2l` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
