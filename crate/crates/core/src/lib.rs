//! Red-teaming toolkit for hyperspectral soil-parameter regressors.
//!
//! Patches are reduced to engineered features, a random forest is fit per
//! soil target, and exact Shapley values drive aggregation, pruning and the
//! red-flag audit.

pub mod aggregation;
pub mod audit;
pub mod data;
pub mod error;
pub mod features;
pub mod forest;
pub mod pipeline;
pub mod pruning;
pub mod shapley;
pub mod util;

pub use data::{BandAxis, Dataset, HyperPatch, SoilTargets, Split, Target};
pub use error::{Error, Result};
pub use features::{FeatureSchema, FeatureTable, TransformationGroup};
pub use forest::{Forest, ForestParams, Tree};
pub use shapley::ShapMatrix;
