//! Random Fourier feature ("random kitchen sinks") acoustic models.
//!
//! The crate covers the full desk-scale loop: sample a [`rff::ProjectionBank`]
//! for a Gaussian or Laplacian kernel, train a softmax output layer on the
//! fixed cosine features with mini-batch SGD, record held-out perplexity,
//! entropy and accuracy for every epoch, and pick a checkpoint by perplexity
//! or by entropy-regularized perplexity (`ln ppx + mean entropy`).
//!
//! The [`oracle`] module holds brute-force references (dense kernel matrices,
//! a dual kernel logistic regression, finite-difference gradients) used to
//! check the approximate path at small sizes.

mod binio;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rff;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use error::{Error, Result};
