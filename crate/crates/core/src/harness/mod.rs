//! Files, datasets and the command-line front end.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod image_io;
pub mod manifest;
pub mod outputs;
pub mod run;
pub mod synth;
