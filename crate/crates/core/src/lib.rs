//! Isometric Gaussian process latent variable model (Iso-GPLVM).
//!
//! Learns a low-dimensional latent representation from pairwise
//! dissimilarities. A sparse Gaussian-process Jacobian field induces random
//! curve lengths between latent points; those lengths are approximated as
//! Nakagami variables and matched to observed distances by a censored
//! likelihood over an ε-neighborhood graph, fitted variationally.
//!
//! Module map:
//! - [`dissimilarity`]: point sets, image stacks, distance measures, dataset
//!   generators and CSV IO.
//! - [`graph`]: ε-graphs, connectivity, 0-dimensional persistence, Dijkstra.
//! - [`nakagami`] and [`special`]: the Nakagami distribution, incomplete gamma
//!   functions and the censored log-likelihood.
//! - [`gp`]: ARD kernel, exact GP posterior, sparse variational Jacobian field.
//! - [`model`]: latent state, curve lengths, the ELBO and the fitting loop.
//! - [`geometry`]: expected metric, magnification factor, geodesics.
//! - [`baselines`]: classical MDS, IsoMap, stress.

pub mod baselines;
pub mod dissimilarity;
pub mod error;
pub mod geometry;
pub mod gp;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nakagami;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
