//! Studies, batches, manifests, and the synthetic corpus.

mod manifest;
mod study;
mod synth;
pub mod text;
pub mod vocab;

use thiserror::Error;

use crate::tensor::ten1::Ten1Error;

pub use manifest::{load_manifest, write_manifest, ManifestRecord};
pub use study::{make_batches, Batch, Study};
pub use synth::{synth_corpus, SynthSpec};
pub use text::{clean_indication, fallback_serialize, tokenize, ReportFilter};
pub use vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: view {path}: {source}")]
    View {
        line: usize,
        path: String,
        #[source]
        source: Ten1Error,
    },
    #[error("line {line}: field `anchor_index` = {anchor_index} out of range for {views} views")]
    AnchorOutOfRange {
        line: usize,
        anchor_index: usize,
        views: usize,
    },
}
