//! Coalescing anti-diffusive particle dynamics in one dimension.

pub mod config;
pub mod flow;
pub mod harness;
pub mod init;
pub mod markov;
pub mod reversal;
pub mod stats;
