//! Localization-head discovery and training-free visual grounding over
//! per-head attention dumps of vision-language models.

pub mod cli;
pub mod corpus;
pub mod entropy;
pub mod error;
pub mod fixtures;
pub mod grounding;
pub mod hull;
pub mod io;
pub mod metrics;
pub mod overlay;
pub mod rle;
pub mod selection;
pub mod stats;
pub mod types;

pub use corpus::Corpus;
pub use error::{Error, Result};
pub use types::{AttentionDump, AttnMap, BBox, BinaryMask, Geometry, HeadId, SampleAnnotation};
