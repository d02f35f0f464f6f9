//! Data ingestion, synthetic tasks, experiment orchestration, sweeps and
//! gradient checks.

pub mod dataset;
pub mod experiment;
pub mod gradcheck;
pub mod mnist;
pub mod synth;
