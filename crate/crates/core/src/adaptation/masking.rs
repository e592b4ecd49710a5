use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{SpecialIds, TokenSequence};
use crate::error::{Error, Result};

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Selection rule for masked-LM training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    /// Fraction of maskable tokens selected per sequence.
    pub ratio: f64,
    /// Probability a selected token becomes `[MASK]`.
    pub mask_prob: f64,
    /// Probability a selected token becomes a random vocabulary word.
    pub random_prob: f64,
}

impl MaskingPolicy {
    /// The 80/10/10 split at the given ratio.
    pub fn new(ratio: f64) -> Result<Self> {
        let p = MaskingPolicy {
            ratio,
            mask_prob: 0.8,
            random_prob: 0.1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask ratio {} outside (0, 1)",
                self.ratio
            )));
        }
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.mask_prob) || !ok(self.random_prob) || self.mask_prob + self.random_prob > 1.0 {
            return Err(Error::Config(
                "mask action probabilities must sum to at most 1".into(),
            ));
        }
        Ok(())
    }

    /// `round(ratio · maskable)`, at least one when anything is maskable.
    pub fn selection_size(&self, maskable: usize) -> usize {
        if maskable == 0 {
            return 0;
        }
        ((self.ratio * maskable as f64).round() as usize).clamp(1, maskable)
    }
}

/// Positions eligible for masking: attended and not a reserved token.
pub fn maskable_positions(seq: &TokenSequence, special: &SpecialIds) -> Vec<usize> {
    (0..seq.len())
        .filter(|&i| seq.attention[i] && !special.is_reserved(seq.ids[i]))
        .collect()
}

/// One sequence after masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    /// Corrupted input.
    pub input: TokenSequence,
    /// Original id at every position.
    pub targets: Vec<usize>,
    /// True where the loss applies.
    pub selected: Vec<bool>,
    /// Action taken at each selected position, in position order.
    pub actions: Vec<(usize, MaskAction)>,
}

impl MaskedSequence {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Masks one sequence. Returns `None` when nothing is maskable.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &TokenSequence,
    policy: &MaskingPolicy,
    special: &SpecialIds,
    vocab_size: usize,
    rng: &mut R,
) -> Option<MaskedSequence> {
    let maskable = maskable_positions(seq, special);
    let n = policy.selection_size(maskable.len());
    if n == 0 {
        return None;
    }
    let mut picked: Vec<usize> = sample(rng, maskable.len(), n)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    picked.sort_unstable();

    let first_word = special.all().iter().max().map_or(0, |&m| m as usize + 1);
    let mut input = seq.clone();
    let mut selected = vec![false; seq.len()];
    let mut actions = Vec::with_capacity(n);
    for pos in picked {
        selected[pos] = true;
        let u: f64 = rng.random();
        let action = if u < policy.mask_prob {
            input.ids[pos] = special.mask;
            MaskAction::Mask
        } else if u < policy.mask_prob + policy.random_prob && vocab_size > first_word {
            input.ids[pos] = rng.random_range(first_word..vocab_size) as u32;
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push((pos, action));
    }
    Some(MaskedSequence {
        input,
        targets: seq.ids.iter().map(|&i| i as usize).collect(),
        selected,
        actions,
    })
}

/// Masks every sequence; ones without maskable tokens are skipped with a
/// warning and reported by index.
pub fn mask_batch<R: Rng + ?Sized>(
    seqs: &[TokenSequence],
    policy: &MaskingPolicy,
    special: &SpecialIds,
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<MaskedSequence>, Vec<usize>) {
    let mut out = Vec::with_capacity(seqs.len());
    let mut skipped = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        match mask_sequence(seq, policy, special, vocab_size, rng) {
            Some(m) => out.push(m),
            None => {
                log::warn!("sequence {i} has no maskable tokens; skipped");
                skipped.push(i);
            }
        }
    }
    (out, skipped)
}
