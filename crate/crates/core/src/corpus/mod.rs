//! Vocabulary, synthetic corpora, denoising corruption and batching.

mod data;
mod synth;
mod vocab;

pub use data::{
    corrupt_for_denoising, corrupt_with, make_batch, pack_batches, padded_tokens, read_fields, read_multi,
    sample_single_source, write_fields, write_multi, MultiSourceExample,
};
pub use synth::{generate, source_token, target_token, CorpusSet, SynthSpec, Task, TextExample};
pub use vocab::Vocabulary;
