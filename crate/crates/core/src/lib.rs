//! Resource-constrained learned bandit algorithms.
//!
//! A recurrent Q-network is meta-trained across two-armed Gaussian bandit
//! tasks under a KL-regularized variational objective whose strength is set by
//! an assumed dataset size `N̂`. The resulting policies, fixed baseline
//! strategies and human choice data are then characterised by a probit
//! regression on belief-derived exploration factors and compared through
//! Bayes factors.

pub mod bandit;
pub mod belief;
pub mod checkpoint;
pub mod comparison;
pub mod error;
pub mod net;
pub mod normal;
pub mod rng;
pub mod strategy;
pub mod trainer;
pub mod varbayes;

pub use error::{Error, Result};
