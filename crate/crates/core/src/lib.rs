//! Image-embodied knowledge representation learning.
//!
//! Entities carry two representations that live in one vector space: a
//! structure-based embedding learned from triples, and an image-based one
//! aggregated from projected image features with instance-level attention.
//! Both are trained jointly under a four-term translational energy with a
//! margin ranking objective.
//!
//! Module map:
//!
//! - [`kg`]: vocabulary, triples, dataset splits, negative sampling
//! - [`model`]: parameters, projection, attention, aggregation, energy
//! - [`training`]: hinge loss, analytic gradients, SGD loop
//! - [`evaluation`]: entity prediction, triple classification, probes
//! - [`synth`]: planted-structure synthetic KGs with image features
//! - [`io`] and [`config`]: binary feature/checkpoint formats, config files
//! - [`cli`]: the `ikrl` command line

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod kg;
pub mod matrix;
pub mod model;
pub mod synth;
pub mod training;

pub use config::{InitStrategy, ModelKind, TrainConfig};
pub use error::{Error, Result};
pub use evaluation::{ClassifyReport, LinkPredReport, ScoringMode};
pub use kg::{Dataset, Slot, Triple, Vocabulary};
pub use matrix::Matrix;
pub use model::{AggregationMode, EnergyTerms, FeatureStore, ModelParams, Norm};
pub use training::{train, train_transe, TrainReport};
