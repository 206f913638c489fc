//! Age- and location-conditioned segmentation for multi-age volumetric data.
//!
//! Two conditioning modules plug into any U-Net shaped backbone: a
//! self-attention block at the bottleneck whose token sequence is prefixed
//! with age and location embeddings, and dense relative coordinate planes
//! concatenated at every decoder stage. A feature-modulation baseline, the
//! training and evaluation engine, and a synthetic multi-age phantom
//! benchmark complete the crate.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod hdsc;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod plane;
pub mod report;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
