//! Corpus ingestion, tokenization, vocabulary, pretrained vectors, padding
//! and word-order perturbation.

pub mod dataset;
pub mod embeddings;
pub mod neighbors;
pub mod perturb;
pub mod tokenize;
pub mod vocab;

pub use dataset::{
    pad_batch, pad_sequence, percentile_length, read_tsv, Batch, Corpus, Dataset, Example, Manifest, RawExample, Split,
};
pub use embeddings::{load_pretrained_vectors, random_embeddings, EmbeddingMatrix, RowSource};
pub use neighbors::nearest_words;
pub use perturb::{shuffle_word_order, RewriteTable, ShuffleMode};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
