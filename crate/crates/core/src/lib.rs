//! Low-rank structure of sampled Q-matrices and how to exploit it.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] dense matrices, a one-sided Jacobi SVD, nuclear norm and
//!   approximate rank.
//! * [`completion`] Soft-Impute matrix completion and the splice-back
//!   reconstruction used during training.
//! * [`uncertainty`] count-based (SimHash) and ensemble-based value
//!   uncertainty, plus per-row entry selection.
//! * [`nn`] a small MLP with exact reverse-mode gradients, Adam and soft
//!   target updates.
//! * [`envs`] LQR, pendulum swing-up and finite MDPs, with analytic oracles.
//! * [`agent`] DDPG and its six Q-matrix reconstruction variants.
//! * [`harness`] configuration, seeded runs, metrics, rank scans,
//!   rank/uncertainty correlation and reporting.
//!
//! Data-parallel inner loops go through [`exec`]; with the `parallel`
//! feature disabled everything runs sequentially and produces identical
//! results.

pub mod agent;
mod blob;
pub mod completion;
pub mod envs;
mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
pub use linalg::Matrix;
