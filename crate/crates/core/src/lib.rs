//! attrscope discovers which words in a weakly annotated image corpus are
//! visual: it partitions images by word presence, scores every network unit
//! by the divergence of its activation distributions across the partition,
//! trains noise-robust classifiers on the most divergent units, and reads a
//! word's visualness off held-out balanced accuracy. The same unit scores
//! drive layer-depth profiles and occlusion saliency maps, evaluated
//! against human annotations.
//!
//! The crate is deterministic end to end: every random choice flows from an
//! explicit seed through named stream derivations, parallel loops only map
//! and collect in input order, and all artifacts are written atomically
//! with fixed formatting.

pub mod actstore;
pub mod classify;
pub mod corpus;
pub mod divergence;
pub mod error;
pub mod image;
pub mod perception;
pub mod pipeline;
pub mod refnet;
pub mod saliency;
pub mod util;

pub use error::{Error, Result};
