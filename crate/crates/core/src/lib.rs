//! Taxonomy-aware app recommendation.
//!
//! A user's adoption of an app is modelled as a walk down the category tree:
//! a softmax over sibling categories at every level, then a binary-tree
//! (hierarchical) softmax among the apps of the chosen subcategory. Parameters
//! are fitted by stochastic gradient ascent on the log-posterior under a
//! Gaussian prior that ties each category's vector to its parent's.
//!
//! The crate also carries four flat latent-factor baselines, a top-N
//! evaluation harness, a planted-model data generator, a binary model file
//! format and a finite-difference gradient checker.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hsoftmax;
pub mod ids;
pub mod model;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
pub use ids::{AppId, HsNodeId, NodeId, UserId, UserIndex};
pub use model::{FlatParams, Model, ModelParams};
pub use taxonomy::CategoryTree;
pub use training::{train, TrainConfig, TrainReport};
