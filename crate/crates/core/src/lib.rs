//! Feature-space contrastive slide representations.
//!
//! Bags of patch embeddings from several frozen extractors and
//! magnifications are mapped to one patient-level vector by a slide encoder
//! (per-extractor embedding MLPs, a residual pair of state-space-dual
//! layers, multi-head gated attention pooling). The encoder is pretrained by
//! momentum contrastive learning, treating different extractors,
//! magnifications and tile subsets of the same patient as views, and is
//! evaluated with an MLP cross-validation protocol and few-shot linear
//! probes.
//!
//! See the guide in `book/` for a walk-through of each piece.

pub mod checkpoint;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod gradcheck;
pub mod interpret;
pub mod nn;
pub mod params;
pub mod ssd;

pub use error::{Error, ErrorCategory, Result};
pub use params::Parameters;
