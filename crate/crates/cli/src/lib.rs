//! Experiment runners and file formats around `gazeshift-core`: dataset
//! directories, checkpoints, training orchestration, and the `gazeshift`
//! command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod expconfig;
pub mod imageio;
pub mod runmeta;
pub mod trainer;
