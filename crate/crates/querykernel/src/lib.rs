//! Command-line runner, trace persistence, benchmarks and the HTTP service
//! for `querykernel-core`.

pub mod audit;
pub mod bench;
pub mod cli;
pub mod config;
pub mod output;
pub mod registry;
pub mod remote;
pub mod runner;
pub mod service;
