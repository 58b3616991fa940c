//! Decentralized stochastic bilevel optimization over peer-to-peer networks.
//!
//! The crate simulates `K` nodes that jointly solve
//! `min_x (1/K) sum_k f_k(x, y*(x))` subject to
//! `y*(x) = argmin_y (1/K) sum_k g_k(x, y)`, exchanging only parameters and
//! gradient estimators with their graph neighbors.
//!
//! Modules, bottom-up:
//! - [`topology`]: graphs, mixing matrices and spectral gaps
//! - [`ingest`]: LIBSVM parsing, splitting and sharding
//! - [`problems`]: the oracle interface plus quadratic and logistic-regression instances
//! - [`hypergrad`]: Neumann-series stochastic hypergradients
//! - [`optim`]: MDBO, VRDBO and the gossip baselines
//! - [`theory`]: problem constants and admissible step sizes
//! - [`harness`]: experiment runner, metrics and record output

pub mod error;
pub mod harness;
pub mod hypergrad;
pub mod ingest;
pub mod optim;
pub mod problems;
pub mod theory;
pub mod topology;
pub mod vecops;

pub use error::{Error, Result};
