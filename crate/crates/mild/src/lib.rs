//! Multitemporal hyperspectral unmixing with a latent-dynamics fusion layer.
//!
//! The crate decomposes a time series of hyperspectral images into material
//! signatures (endmembers) and per-pixel material fractions (abundances). A
//! per-time encoder produces pseudo-abundances, a multistep bidirectional
//! fusion layer couples them across time, and a perturbed linear-mixing
//! decoder reconstructs the observations. Classical VCA + FCLS baselines,
//! deterministic synthetic scene generators, NRMSE evaluation, and a
//! numerical verification harness for the discretization's consistency,
//! convergence, and stability round out the toolbox.
//!
//! See the `book/` guide for a narrative walk-through; every snippet there is
//! compiled and run as a doc-test of this crate.

pub mod cli;
pub mod diffkit;
pub mod dyncheck;
pub mod hsidata;
pub mod initbase;
pub mod metrics;
pub mod mild;
pub mod synthgen;
pub mod rng;
