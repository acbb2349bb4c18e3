//! File formats, synthetic data, checkpoints, a threaded executor and the
//! `segmental` command-line tool, built on `segmental-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod exec;
pub mod formats;
pub mod metrics;
pub mod normalize;
pub mod synth;
