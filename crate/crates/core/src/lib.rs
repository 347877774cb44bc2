//! Learned layer-removal compression for convolutional networks.
//!
//! A recurrent policy reads a teacher network layer by layer and decides
//! which convolutions to keep. Candidate students are trained by
//! distillation, scored on accuracy, latency and size, and the policy is
//! updated with a baselined score-function gradient.

pub mod arch;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod nn;
pub mod policy;
pub mod prune;
pub mod reinforce;
pub mod report;
pub mod reward;
