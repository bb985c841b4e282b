//! Federated fine-tuning of a compressed, partitioned backbone for
//! traffic-flow classification.
//!
//! The pipeline is: compress a layered backbone by layer extraction, swap its
//! output head for a linear network head, split it into a frozen extractor
//! and a classifier, then run federated rounds in which every client trains
//! LoRA adapters of its own rank plus the head. The server aggregates
//! heterogeneous-rank adapters by stacking, which reproduces the exact
//! weighted sum of the clients' low-rank deltas.
//!
//! Module map:
//!
//! - [`flowdata`]: records, ingestion, synthetic flows, splits, Dirichlet partitioning
//! - [`nncore`]: matrices, parameter sets, layer kernels, Adam, checkpoints
//! - [`model`]: backbone, layer extraction, network head, extractor/classifier split
//! - [`lora`]: adapters, effective weights, dense merges, upload payloads
//! - [`adaptive`]: resource normalization and the power-of-two rank rule
//! - [`aggregate`]: reference, stacking, naive and zero-padding aggregation
//! - [`metrics`]: confusion matrix and macro-averaged scores
//! - [`federation`]: client sampling, local training, the round loop
//! - [`scenario`]: end-to-end experiment configuration, runs and sweeps

pub mod adaptive;
pub mod aggregate;
pub mod error;
pub mod exec;
pub mod federation;
pub mod flowdata;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nncore;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
pub use nncore::Matrix;
