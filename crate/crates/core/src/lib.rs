//! Counterfactual learning to rank under position and trust bias.
//!
//! Clicks are simulated with an affine model `P(c | d, k) = alpha_k R_d + beta_k`.
//! The crate provides the simulator, off-policy ranking-metric estimators
//! (naive, IPS, DM, DR), cross-entropy losses for unbiased relevance
//! regression, policy training, EM estimation of the bias parameters and an
//! exact-enumeration oracle for small instances.

pub mod bias_em;
pub mod click_sim;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod ltr;
pub mod mlp;
pub mod oracle;
pub mod policy;
pub mod propensity;
pub mod regression;
pub mod rng;

pub use click_sim::{BiasParams, ClickLog, Impression};
pub use data::{Dataset, Partition, Query};
pub use error::{Error, Result};
pub use estimators::{EstimateReport, EstimatorKind};
pub use policy::{PlPolicy, PolicyMode};
