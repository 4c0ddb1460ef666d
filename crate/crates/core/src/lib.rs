//! Nonparametric latent-feature models for categorical data.
//!
//! An Indian Buffet Process prior over a binary feature matrix Z is combined
//! with a multinomial-logit observation model: each dimension d has a weight
//! matrix Bᵈ whose row 0 is an always-active bias. Two inference engines are
//! provided:
//!
//! * [`gibbs`]: a collapsed Gibbs sampler over Z, with the weights integrated
//!   out by a per-dimension Laplace approximation ([`laplace`]).
//! * [`vi`]: truncated stick-breaking variational inference.
//!
//! [`synthgen`] builds verification datasets and [`analysis`] turns fitted
//! models into prevalence, co-occurrence and probability-ratio tables.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod gibbs;
pub mod io;
pub mod laplace;
pub mod model;
pub mod rng;
pub mod special;
pub mod synthgen;
pub mod vi;

pub use error::{Error, Result};
pub use model::{
    category_probabilities, left_order, log_likelihood, sample_prior, Hyperparams, LatentFeatureState,
    ObservationMatrix, WeightStack,
};
