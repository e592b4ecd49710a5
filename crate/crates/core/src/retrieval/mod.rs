//! Visual feature source: embedding bank, exact cosine search and the
//! per-sentence retrieval budget.

mod bank;
mod retrieve;

pub use bank::{base_id, FeatureBank, NOISY_SUFFIX, XABK_MAGIC, XABK_VERSION};
pub use retrieve::{allocate, retrieve_images, split_sentences, RetrievalResult, DEFAULT_K};
