//! Return-conditioned sequence-model policy for sequential recommendation,
//! with value-guided return relabeling and entropy-constrained online
//! finetuning, plus a small item-graph environment to exercise it.

pub mod agent;
pub mod config;
pub mod envsim;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod policy;
pub mod qlearn;
pub mod relabel;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
