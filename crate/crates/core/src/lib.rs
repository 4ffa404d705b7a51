//! Gaussian Naive Bayes over vertically partitioned, noise-perturbed data,
//! fitted by a trusted coordinator from per-site sufficient statistics.

pub mod canonical;
pub mod dataset;
pub mod harness;
pub mod envelope;
pub mod model;
pub mod perturb;
pub mod protocol;
pub mod session;
pub mod transport;
