//! Imbalanced label coupling laboratory.
//!
//! Builds channel-stacked synthetic datasets from Patch, MNIST and CIFAR-10
//! building blocks, trains classifiers on them and measures how strongly the
//! trained networks follow a coarse-to-fine decision hierarchy.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`datasets`]: the three image sources in a uniform 32×32 layout.
//! - [`coupling`]: coupling trees and the composed train/test sets.
//! - [`variants`]: half-inverted MNIST and corruption-coupled CIFAR-10.
//! - [`models`] and [`training`]: the ResNet-18 variant, the MLP and the SGD recipe.
//! - [`evaluation`], [`oracle`], [`treeview`]: grouped confusion matrices,
//!   HCA/AHCA/PCS, the idealised hierarchical predictor and the inferred tree.
//! - [`dfr`]: last-layer retraining and the three-model comparison.
//! - [`experiment`]: config-driven runs and their output directories.

pub mod container;
pub mod coupling;
pub mod datasets;
pub mod dfr;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod heatmap;
pub mod imageset;
pub mod logreg;
pub mod models;
pub mod oracle;
pub mod training;
pub mod treeview;
pub mod variants;

mod util;

pub use error::{Error, Result};
