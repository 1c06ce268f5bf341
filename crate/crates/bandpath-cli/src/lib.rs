//! Batch front end for the band-path library: scenario configuration,
//! seeding, subcommands, and report files.

pub mod config;
pub mod exec;
pub mod runner;

pub use exec::RayonExec;
