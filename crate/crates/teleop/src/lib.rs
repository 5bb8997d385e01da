//! Host side of the delay-robust teleoperation stack: config files,
//! checkpoints, training pipeline, benchmark outputs and the live service.

pub mod bench;
pub mod cli;
pub mod config;
pub mod io;
pub mod live;
pub mod pipeline;
pub mod wire;
