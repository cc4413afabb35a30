//! Traffic quotient graphs with contrastive spatial-context pre-training.
//!
//! The pipeline turns an OpenStreetMap road extract and a set of traffic
//! sensors into a sensor-level *quotient graph* whose edges follow real road
//! connectivity, extracts per-node spatial-context features (speed limits,
//! lanes, coordinates, amenity density), pre-trains a GCN-based geometric
//! encoder on stochastically augmented subgraph pairs, and injects the frozen
//! embeddings into a small spatio-temporal forecaster through a spatially
//! gated addition layer.
//!
//! Modules follow the data flow:
//!
//! - [`osm`] / [`sensors`]: ingestion of road extracts, sensor locations and
//!   speed series, plus CSV interchange formats.
//! - [`quotient`]: sensor-to-road matching, cluster partition, quotient graph
//!   construction and ε-pruning.
//! - [`features`]: the N×F spatial-context feature matrix and min-max scaling.
//! - [`sampler`]: cluster node selection and BFS truncation, producing
//!   contrastive positive pairs.
//! - [`nn`]: a small deterministic reverse-mode tensor toolkit (dense, GCN,
//!   GraphNorm, NT-Xent, Adam) that everything trainable is built on.
//! - [`encoder`] / [`forecaster`]: the geometric encoder with its
//!   pre-training loop, and the reduced gated-TCN + GCN forecaster.
//! - [`synth`], [`variants`], [`runner`], [`report`]: synthetic-city
//!   generation, the experiment variant grid, end-to-end orchestration and
//!   report emission.

pub mod encoder;
pub mod error;
pub mod features;
pub mod forecaster;
pub mod nn;
pub mod osm;
pub mod quotient;
pub mod report;
pub mod runner;
pub mod sampler;
pub mod sensors;
pub mod synth;
pub mod variants;

pub use error::{Error, Result};
