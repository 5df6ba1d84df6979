//! Hybrid key argument extraction: opinion sampling for human annotators,
//! pairwise consolidation with label propagation, clustering, representative
//! selection, and evaluation.

pub mod baseline;
pub mod clustering;
pub mod consolidation;
pub mod engine;
pub mod evaluation;
pub mod eventlog;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod sampling;
pub mod selection;
pub mod sim;
pub mod service;
pub mod similarity;
pub mod util;
