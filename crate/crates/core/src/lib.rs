//! Hierarchical classification over taxonomy trees.
//!
//! The crate is organized bottom-up:
//!
//! - [`taxonomy`]: the class tree, derived softmax heads and label routing.
//! - [`data`]: datasets, synthetic generation, stratified splits, class weights.
//! - [`volprep`]: CT volume resampling, intensity normalization, cropping,
//!   augmentation and pooling featurization.
//! - [`nnet`]: dense layers, the dense-connectivity backbone, weighted
//!   cross-entropy, Adam and finite-difference gradient checks.
//! - [`strategies`]: the five head wirings (leaf-node, flattened, leaky
//!   flattened, dense, leaky dense), masked multi-head loss, training and
//!   probability aggregation.
//! - [`metrics`]: ROC-AUC and the per-head / per-leaf weighted means.
//! - [`config`] and [`runner`]: the experiment runner behind the `hiertax` binary.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod rng;
pub mod runner;
pub mod strategies;
pub mod taxonomy;
pub mod volprep;

pub use error::{Error, Result};
pub use strategies::{Model, ModelConfig, StrategyKind, TrainConfig};
pub use taxonomy::{Head, NodeTag, RoutedLabel, Target, Taxonomy};
