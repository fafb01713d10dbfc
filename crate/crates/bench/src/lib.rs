//! Shared fixtures for the benchmarks.

use mvrg::corpus::{synth_corpus, Batch, SynthSpec, Vocabulary};
use mvrg::{ModelDims, ParamStore};

/// A batch of `n` synthetic studies with a full parameter store for `dims`.
pub fn fixture(n: usize, dims: &ModelDims) -> (Batch, Vocabulary, ParamStore) {
    let (studies, vocab) = synth_corpus(&SynthSpec {
        n_studies: n,
        image_size: dims.image_size,
        ..SynthSpec::default()
    });
    let mut store = mvrg::mvcl::init_stage1(dims, vocab.len(), 0);
    mvrg::kgrg::init_stage2(&mut store, dims, vocab.len(), 0);
    (Batch::from_studies(&studies), vocab, store)
}
