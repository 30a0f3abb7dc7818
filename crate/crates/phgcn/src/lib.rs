//! Hierarchical part-graph feature learning and retrieval evaluation.
//!
//! Images enter as grids of descriptors (read from the PHGF binary format
//! or generated synthetically), are average-pooled into a hierarchy of
//! horizontal parts, and connected into a three-layer part graph. A small
//! graph-convolutional network with an appearance side-channel produces
//! fused per-part features; per-part classifiers drive training and the
//! concatenated features drive retrieval, scored with CMC and mAP.
//!
//! Gradients are derived by hand and validated against central finite
//! differences; see [`optim::grad_check`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod phgf;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
