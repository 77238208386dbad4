//! Sequential Bayesian continual learning on small neural networks.
//!
//! The pipeline propagates a posterior across a task stream: sample it
//! with HMC, refit the samples as a Gaussian mixture, and use the fit as
//! the prior for the next task. Conjugate scalar filters, VCL, and
//! ProtoCL provide the reference points the propagation is compared
//! against.

pub mod autodiff;
pub mod data;
pub mod density;
pub mod error;
pub mod filter;
pub mod gmm;
pub mod hmc;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod opt;
pub mod protocl;
pub mod seqbayes;
pub mod vcl;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
