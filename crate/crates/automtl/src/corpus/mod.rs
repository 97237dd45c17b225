//! Dataset ingestion, cleaning, tokenization, charset and embedding
//! management, splitting, and batching.

mod batch;
mod charset;
mod clean;
mod data;
mod embeddings;

pub use batch::{
    make_batches, map_tokens_to_embeddings, ordered_batches, AutoTarget, Batch, BatchPlan,
    Batches, InputMode, PrimaryTarget,
};
pub use charset::Charset;
pub use clean::{clean_tweet, normalize_words, tokenize_chars, tokenize_words, CleanOutcome, DropReason};
pub use data::{load_tsv, save_tsv, split_dataset, Document, Label, LabelKind, LoadedDocs};
pub use embeddings::{load_embeddings, EmbeddingStore};

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::Result;

/// Built-in English stop-word list, one word per line.
pub const DEFAULT_STOPWORDS: &str = include_str!("../../fixtures/stopwords_en.txt");

pub fn default_stopwords() -> HashSet<String> {
    DEFAULT_STOPWORDS
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// One token per line.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let content = fs::read_to_string(path)?;
    Ok(content
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}
