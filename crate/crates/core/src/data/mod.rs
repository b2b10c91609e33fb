//! Synthetic corpus, toy tokenizer and dataset files.

pub mod dataset;
pub mod synth;
pub mod vocab;

pub use dataset::{generate_corpus, load_jsonl, write_corpus_dir, BatchIterator};
pub use synth::{describe_pixels, generate_samples, ImageSpec, Scene, SyntheticSample, TaskMix};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD};
