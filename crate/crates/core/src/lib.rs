//! Distributed Bayesian matrix factorization with staged posterior propagation.
//!
//! The data matrix is cut into an `r x c` grid of blocks. Inference runs in
//! three stages: the top-left block first, then the blocks sharing its rows or
//! columns, then everything else. Each stage hands per-row Gaussian (or
//! Gaussian-mixture) approximations of its posteriors to the next stage as
//! priors, and a final aggregation step multiplies the per-block marginals
//! back together while dividing away the propagated terms.
//!
//! Module map:
//!
//! - [`data`]: sparse matrices, loaders, simulation, splits, ordering and
//!   grid partitioning.
//! - [`sampler`]: the blocked Gibbs sampler with Normal-Wishart hyperpriors
//!   and propagated row priors.
//! - [`approx`]: moment-matched, dominant-mode and mixture fits of per-row
//!   sample clouds, plus lambda-means clustering.
//! - [`aggregate`]: precision-weighted products, eigenvalue correction and
//!   the two aggregation rules.
//! - [`pipeline`]: full-data, propagated and embarrassingly parallel runs
//!   with file-based stage handoff.
//! - [`posterior_io`]: the binary posterior file exchanged between stages.
//! - [`eval`]: RMSE, frequency bins, subset correlations, speed-up.
//! - [`cost`]: the proportional compute and communication cost model.
//! - [`decomposition`]: grid-exact evaluation of the staged product density
//!   on tiny problems.
//! - [`cli`]: the command-line front end used by the `bmfpp` binary.
//!
//! Runnable walkthroughs live in `examples/`; start with
//! `cargo run --release --example posterior_propagation`.

pub mod aggregate;
pub mod approx;
pub mod cli;
pub mod cost;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod pipeline;
pub mod posterior_io;
pub mod sampler;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::Factors;
