//! Compositional zero-shot learning by prototype propagation.
//!
//! Attribute and object prototypes are learned from local feature-map
//! patches, pushed towards independence from the other primitive's labels
//! with a kernel independence penalty, and propagated through a bipartite
//! attribute/object → composition graph to give one prototype per
//! composition, including compositions never seen in training.

pub mod compgraph;
pub mod error;
pub mod evalzsl;
pub mod independence;
pub mod numgrad;
pub mod protolayer;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
