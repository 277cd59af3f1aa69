//! Desk-scale continual-learning laboratory.
//!
//! The library trains a small frozen-base classifier with low-rank adapters
//! over a sequence of synthetic tasks, alternating a fast inner loop on the
//! current task with a single-step outer loop on a replay buffer. Each cycle
//! estimates per-parameter importance from gradient-weight products, smooths
//! it with exponential moving averages, binarizes both distributions with a
//! quantile threshold, and fuses the masked inner/outer task vectors back
//! into the pre-cycle parameters. Plain sequential and replay baselines plus
//! the ablation fusion variants are included so forgetting/transfer effects
//! can be measured with OP and BWT on accuracy matrices.

pub mod error;
pub mod fusion;
pub mod importance;
pub mod memory;
pub mod model;
pub mod numkit;
pub mod report;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
