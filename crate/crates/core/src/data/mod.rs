//! Tokenization, vocabularies, parallel corpora and batching.

mod batch;
mod corpus;
mod tokenize;
mod vocab;

pub use batch::{batch_indices, batch_iter, Batch, EncodedPair};
pub(crate) use corpus::split_lines;
pub use corpus::{load_parallel_corpus, pair_lines, read_lines, split_train_validation, ParallelCorpus, ParallelPair};
pub use tokenize::{detokenize, is_punctuation, tokenize, tokenize_bytes};
pub use vocab::{TokenId, Vocabulary, BOS, DEFAULT_MAX_SIZE, EOS, NUM_SPECIALS, PAD, SPECIAL_TOKENS, UNK, VOCAB_MAGIC};
