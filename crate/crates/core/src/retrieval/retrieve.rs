use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::textfeat::EmbeddingProvider;
use crate::xadapter::{FeatureMatrix, FeatureOrigin};

use super::FeatureBank;

/// Default retrieval budget.
pub const DEFAULT_K: usize = 10;

/// Splits on `.`, `!` or `?` followed by whitespace or the end of the text.
/// Text without such a boundary comes back whole.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = iter.peek().map_or(true, |(_, n)| n.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                let piece = text[start..end].trim();
                if !piece.is_empty() {
                    out.push(piece.to_string());
                }
                start = end;
            }
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Per-sentence budgets: `k / l` each, plus one for a random subset of
/// `k mod l` sentences.
pub fn allocate<R: Rng + ?Sized>(k: usize, l: usize, rng: &mut R) -> Vec<usize> {
    if l == 0 {
        return Vec::new();
    }
    let mut counts = vec![k / l; l];
    for i in sample(rng, l, k % l) {
        counts[i] += 1;
    }
    counts
}

/// Rows chosen for one text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `(bank index, cosine score)`, grouped by sentence in text order.
    pub chosen: Vec<(usize, f64)>,
    /// `(sentence index, n_i)` for every sentence.
    pub allocation: Vec<(usize, usize)>,
    pub sentences: Vec<String>,
}

impl RetrievalResult {
    /// Unit-normalized bank rows of every chosen entry.
    pub fn features(&self, bank: &FeatureBank) -> Result<FeatureMatrix> {
        if self.chosen.is_empty() {
            return Err(Error::contract("retrieval chose no rows"));
        }
        let data: Vec<f64> = self
            .chosen
            .iter()
            .flat_map(|&(i, _)| bank.unit_row(i).iter().copied())
            .collect();
        let rows = Tensor::matrix(self.chosen.len(), bank.dim(), data)?;
        FeatureMatrix::new(rows, FeatureOrigin::Retrieved)
    }
}

/// Even allocation of `k` nearest neighbours across the sentences of
/// `text`. Rows retrieved by several sentences are kept every time.
pub fn retrieve_images<R: Rng + ?Sized>(
    bank: &FeatureBank,
    text: &str,
    k: usize,
    provider: &dyn EmbeddingProvider,
    rng: &mut R,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::contract("retrieval budget K must be at least 1"));
    }
    if bank.len() < k {
        return Err(Error::contract(format!(
            "bank holds {} rows but K = {k}",
            bank.len()
        )));
    }
    if provider.dim() != bank.dim() {
        return Err(Error::Dimension {
            op: "retrieve_images",
            left: vec![bank.dim()],
            right: vec![provider.dim()],
        });
    }
    let sentences = split_sentences(text);
    if sentences.is_empty() {
        return Err(Error::contract("cannot retrieve for empty text"));
    }
    let counts = allocate(k, sentences.len(), rng);
    let mut chosen = Vec::with_capacity(k);
    for (sentence, &n) in sentences.iter().zip(&counts) {
        if n > 0 {
            let q = provider.embed_text(sentence)?;
            chosen.extend(bank.cosine_topk(&q, n)?);
        }
    }
    Ok(RetrievalResult {
        chosen,
        allocation: counts.into_iter().enumerate().collect(),
        sentences,
    })
}
