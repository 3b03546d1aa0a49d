//! Key-finding extraction: the word-pair grid codec, a trainable grid
//! tagger and an LLM-backed extractor.

pub mod grid;
pub mod llm;
pub mod model;

use crate::error::Result;
use crate::types::{AnnotationSet, Consultation};

/// Anything that turns a consultation into extracted mentions.
pub trait ExtractionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, consultation: &Consultation) -> Result<AnnotationSet>;
}

pub use grid::{decode_grid, encode_entities, GridLabel, WordPairGrid};
pub use llm::{HttpLlmClient, LlmBackend, LlmClient};
pub use model::{train_grid_model, GridModel, GridModelConfig};
