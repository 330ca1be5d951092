//! Command-line front end for `elsa-core`: configuration resolution,
//! checkpoints, metrics streams and the subcommand bodies.

pub mod commands;
pub mod persist;
pub mod resolve;
