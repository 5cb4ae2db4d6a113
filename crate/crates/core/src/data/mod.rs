//! Tokenization, datasets, scoring text, and synthetic data.

mod corpus;
mod dataset;
pub mod synthetic;
mod tokenizer;

pub use corpus::{generic_corpus, Corpus, IN_DOMAIN_SAMPLES};
pub use dataset::{load_csv, write_csv, Dataset, Record, Split};
pub use synthetic::{synthetic_dataset, SyntheticConfig, VocabSubsets};
pub use tokenizer::{fnv1a_64, Tokenizer, PAD_ID, UNK_ID};
pub(crate) use tokenizer::FNV_PRIME;
