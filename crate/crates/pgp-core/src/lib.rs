//! Core library for PGP, a relational-prior pill detector at desk scale.
//!
//! The pipeline: prescription corpora and box annotations become two generic
//! class graphs (co-occurrence and relative size); per-image region features
//! are pseudo-classified and used to condense those graphs down to the image;
//! a graph transformer network fuses the relational channels and a GCN embeds
//! the regions; embeddings are concatenated with visual features for the final
//! classification and box-regression heads. A synthetic pill world makes the
//! whole mechanism testable end to end.

pub mod ablate;
pub mod config;
pub mod evaluate;
pub mod fusion;
pub mod graphs;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod relational;
pub mod train;
pub mod world;
