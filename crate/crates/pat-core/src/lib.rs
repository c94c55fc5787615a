//! Probabilistic attribute tree (PAT).
//!
//! A PAT is a tree of small fully-connected layers whose topology follows an
//! ordered list of categorical attributes: each non-leaf node clusters its
//! features around one learnable center per attribute state and routes every
//! sample to all child nodes with soft probabilities. Leaf features feed a
//! bank of per-leaf classifiers fused by membership mass (the marginal
//! softmax head). Training jointly minimizes the classification loss and an
//! attribute-supervised pull/push clustering loss, with cluster centers moved
//! by their own mini-batch update rule.
//!
//! Modules:
//! - [`kernels`]: dense vector/matrix primitives, cosine similarity and its
//!   partial derivatives, rectified affine layers, stable softmax.
//! - [`schema`]: attribute schemas and ground-truth attribute paths.
//! - [`tree`]: tree construction, soft membership propagation, the clustering
//!   loss with its prescribed backward and center update rules.
//! - [`head`]: per-leaf classifiers and the marginal softmax loss with its
//!   full analytic gradient.
//! - [`trainer`]: the joint forward-backward training loop.
//! - [`data`]: synthetic attribute-confounded datasets, dataset and model
//!   file formats.
//! - [`verify`]: finite-difference and term-by-term formula oracles, cluster
//!   purity.
//! - [`bench`]: baselines (flat, attribute-specific, hard-routing ablation),
//!   benchmark comparison and the attribute-label-fraction sweep.

pub mod bench;
pub mod data;
pub mod error;
pub mod head;
pub mod kernels;
pub mod schema;
pub mod trainer;
pub mod tree;
pub mod verify;

pub use error::{PatError, Result};
pub use head::LeafClassifiers;
pub use schema::{AttributePath, AttributeSchema};
pub use trainer::{PatModel, TrainConfig, TrainState};
pub use tree::{MembershipTrace, PatTree};
