//! Retrieval-augmented modality completion over item co-interaction graphs.
//!
//! The pipeline projects user-item interactions onto an item graph, masks
//! feature slots, retrieves a relevance-refined subgraph around each query,
//! encodes it with a graph transformer carrying Laplacian positional
//! encodings, and decodes missing modalities through a sparse codebook.

pub mod error;
pub mod eval;
pub mod graph;
pub mod modality;
pub mod model;
pub mod retrieval;
pub mod seed;
pub mod spectral;

pub use error::{Error, Result};
