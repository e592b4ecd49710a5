//! Text-side feature sources: embedding providers and chunked assembly.

mod assemble;
mod provider;

pub use assemble::{chunk_tokens, ChunkedFeatures, Granularity, TextFeatureAssembler, CHUNK_LIMIT};
pub use provider::{fnv1a64, BankProvider, EmbeddingProvider, StubProvider};
