//! Tokenization, corpus loading and batching.

pub mod batches;
pub mod corpus;
pub mod synth;
pub mod tokenizer;

pub use batches::{eval_batches, make_batches, Batch, BatchStream, SplitData};
pub use corpus::load_corpus;
pub use tokenizer::{decode, encode, EOS, VOCAB_SIZE};
