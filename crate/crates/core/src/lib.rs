//! Empirical-Bayes Gamma-Poisson priors with Thompson-sampling online
//! learning for ranking under cold start and non-stationarity.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gamma_poisson;
pub mod online_learner;
pub mod optim;
pub mod prior_net;
pub mod ranker;
pub mod simulation;
pub mod special;
pub mod types;

pub use error::{Error, Result};
pub use types::{ArmKey, ItemId, QueryId};
