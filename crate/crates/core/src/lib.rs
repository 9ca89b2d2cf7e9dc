//! Reference-based visual grounding.
//!
//! The pipeline pools template features into a per-instance bank, refines
//! embeddings with a small residual adapter trained contrastively, labels
//! region proposals by cosine similarity, and asks a language model (or a
//! deterministic heuristic) which detected candidate each referring
//! expression means.

pub mod adapter;
pub mod chat;
pub mod checkpoint;
pub mod describer;
pub mod detector;
pub mod evalkit;
pub mod featio;
pub mod geom;
pub mod matcher;
pub mod profile;
pub mod refdb;
pub mod synthgen;

pub use adapter::{AdapterParams, TrainConfig};
pub use detector::Detection;
pub use featio::{Embedding, TemplateBank};
pub use geom::{BoundingBox, RasterMask};
pub use profile::ObjectProfile;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/adapter.md")]
    mod adapter {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
