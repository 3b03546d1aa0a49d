//! Phenotype key-finding extraction and HPO normalization.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod io;
pub mod ner;
pub mod nn;
pub mod normalize;
pub mod ontology;
pub mod pipeline;
pub mod preprocess;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    char_len, char_slice, fragments_overlap, mention_text, AnnotationSet, Category, Consultation,
    HpoId, Mention, Sentence, Span, Token,
};
