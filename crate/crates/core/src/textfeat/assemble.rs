use serde::{Deserialize, Serialize};

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::xadapter::{FeatureMatrix, FeatureOrigin};

use super::EmbeddingProvider;

/// Token limit of the external text encoder.
pub const CHUNK_LIMIT: usize = 77;

/// Greedy fixed-size slicing; only the last chunk may be short.
pub fn chunk_tokens(ids: &[u32], limit: usize) -> Result<Vec<Vec<u32>>> {
    if limit == 0 {
        return Err(Error::Config("chunk limit must be at least 1".into()));
    }
    Ok(ids.chunks(limit).map(<[u32]>::to_vec).collect())
}

/// Rows produced per chunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One pooled vector per chunk.
    #[default]
    PerChunk,
    /// One vector per token.
    PerToken,
}

/// Chunk features padded to a fixed row count.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedFeatures {
    pub chunks: Vec<Vec<u32>>,
    /// `[L × d_c]`; rows at and past `valid_len` are zero.
    pub features: Tensor,
    pub valid_len: usize,
    /// Rows were dropped to fit `L`.
    pub truncated: bool,
}

impl ChunkedFeatures {
    /// Feature matrix with the padding rows masked out of attention.
    pub fn to_feature_matrix(&self) -> Result<FeatureMatrix> {
        let l = self.features.rows();
        let valid = (0..l).map(|i| i < self.valid_len).collect();
        FeatureMatrix::with_mask(self.features.clone(), valid, FeatureOrigin::TextChunks)
    }
}

/// Builds T-expert feature matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFeatureAssembler {
    pub limit: usize,
    /// Fixed row count `L`.
    pub max_rows: usize,
    #[serde(default)]
    pub granularity: Granularity,
}

impl TextFeatureAssembler {
    pub fn new(max_rows: usize) -> Self {
        TextFeatureAssembler {
            limit: CHUNK_LIMIT,
            max_rows,
            granularity: Granularity::PerChunk,
        }
    }

    /// Desk-scale default, `L = 16`.
    pub fn desk() -> Self {
        Self::new(16)
    }

    /// Two full chunks, `L = 154`.
    pub fn reference() -> Self {
        Self::new(2 * CHUNK_LIMIT)
    }

    pub fn assemble_ids(
        &self,
        ids: &[u32],
        provider: &dyn EmbeddingProvider,
    ) -> Result<ChunkedFeatures> {
        if self.max_rows == 0 {
            return Err(Error::Config("feature row count L must be positive".into()));
        }
        if ids.is_empty() {
            return Err(Error::contract("no tokens to build text features from"));
        }
        let chunks = chunk_tokens(ids, self.limit)?;
        let dc = provider.dim();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for chunk in &chunks {
            match self.granularity {
                Granularity::PerChunk => rows.push(provider.embed_ids(chunk)?),
                Granularity::PerToken => rows.extend(provider.embed_ids_per_token(chunk)?),
            }
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dc) {
            return Err(Error::Dimension {
                op: "provider output",
                left: vec![dc],
                right: vec![bad.len()],
            });
        }
        let truncated = rows.len() > self.max_rows;
        if truncated {
            log::warn!(
                "text features truncated from {} to {} rows",
                rows.len(),
                self.max_rows
            );
            rows.truncate(self.max_rows);
        }
        let valid_len = rows.len();
        let mut data = vec![0.0; self.max_rows * dc];
        for (i, row) in rows.iter().enumerate() {
            data[i * dc..(i + 1) * dc].copy_from_slice(row);
        }
        Ok(ChunkedFeatures {
            chunks,
            features: Tensor::matrix(self.max_rows, dc, data)?,
            valid_len,
            truncated,
        })
    }

    /// Tokenizes `text` with `vocab` (no `[CLS]`/`[SEP]`) and assembles.
    pub fn assemble(
        &self,
        text: &str,
        vocab: &Vocabulary,
        provider: &dyn EmbeddingProvider,
    ) -> Result<ChunkedFeatures> {
        self.assemble_ids(&vocab.tokenize(text).ids, provider)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textfeat::StubProvider;

    #[test]
    fn chunk_lengths() {
        let lens = |n: usize| -> Vec<usize> {
            let ids: Vec<u32> = (0..n as u32).collect();
            chunk_tokens(&ids, 77)
                .unwrap()
                .iter()
                .map(Vec::len)
                .collect()
        };
        assert_eq!(lens(160), vec![77, 77, 6]);
        assert_eq!(lens(77), vec![77]);
        assert!(lens(0).is_empty());
        assert!(chunk_tokens(&[1], 0).is_err());
    }

    #[test]
    fn empty_text_is_rejected() {
        let p = StubProvider::new(4, 0).unwrap();
        assert!(TextFeatureAssembler::new(8).assemble_ids(&[], &p).is_err());
    }

    #[test]
    fn single_chunk_pads_with_zeros() {
        let p = StubProvider::new(4, 0).unwrap();
        let out = TextFeatureAssembler::new(8)
            .assemble_ids(&[5, 6, 7], &p)
            .unwrap();
        assert_eq!(out.valid_len, 1);
        assert!(out.features.row(0).iter().any(|&v| v != 0.0));
        for i in 1..8 {
            assert!(out.features.row(i).iter().all(|&v| v == 0.0));
        }
        assert!(!out.truncated);
        let fm = out.to_feature_matrix().unwrap();
        assert_eq!(fm.valid_len(), 1);
    }

    #[test]
    fn two_chunks_match_manual_stack() {
        let p = StubProvider::new(6, 3).unwrap();
        let ids: Vec<u32> = (0..100).collect();
        let out = TextFeatureAssembler::new(4).assemble_ids(&ids, &p).unwrap();
        assert_eq!(out.valid_len, 2);
        assert_eq!(
            out.features.row(0),
            p.embed_ids(&ids[..77]).unwrap().as_slice()
        );
        assert_eq!(
            out.features.row(1),
            p.embed_ids(&ids[77..]).unwrap().as_slice()
        );
    }

    #[test]
    fn overflow_truncates_and_flags() {
        let p = StubProvider::new(3, 0).unwrap();
        let mut asm = TextFeatureAssembler::new(4);
        asm.granularity = Granularity::PerToken;
        let out = asm.assemble_ids(&[5, 6, 7, 8, 9, 10], &p).unwrap();
        assert!(out.truncated);
        assert_eq!(out.valid_len, 4);
        assert_eq!(out.features.row(3), p.embed_ids(&[8]).unwrap().as_slice());
    }
}
