use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{mask_batch, MaskedSequence, MaskingPolicy};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Graph};

use super::{EncoderModel, TokenSequence};

/// Settings for building a small base model from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate the held-out loss every this many steps (and at step 0).
    pub eval_every: usize,
    /// Sequences in the fixed evaluation set.
    pub eval_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch: 8,
            lr: 3e-3,
            seed: 0,
            eval_every: 50,
            eval_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_losses: Vec<f64>,
    /// `(step, loss)` on the fixed evaluation set.
    pub eval_losses: Vec<(usize, f64)>,
}

impl PretrainReport {
    pub fn final_eval(&self) -> Option<f64> {
        self.eval_losses.last().map(|e| e.1)
    }
}

/// Mean masked-LM loss of `model` on pre-masked sequences.
pub fn evaluate_mlm(model: &EncoderModel, batch: &[MaskedSequence]) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let feats = vec![None; batch.len()];
    let loss = model.masked_lm_loss_graph(&mut g, &p, batch, None, &feats)?;
    Ok(g.value(loss).item())
}

/// Trains every parameter of an unfrozen model with masked-LM on `corpus`.
/// Evaluation uses one masking of the first `eval_size` sequences, fixed
/// for the whole run.
pub fn pretrain_toy(
    model: &mut EncoderModel,
    corpus: &[TokenSequence],
    policy: &MaskingPolicy,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if model.is_frozen() {
        return Err(Error::contract("pretraining a frozen encoder"));
    }
    if corpus.is_empty() {
        return Err(Error::contract("empty pretraining corpus"));
    }
    if cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::Config(
            "batch and eval_every must be positive".into(),
        ));
    }
    policy.validate()?;
    let special = model.config().special;
    let vocab = model.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let eval_n = cfg.eval_size.clamp(1, corpus.len());
    let (eval_set, _) = mask_batch(&corpus[..eval_n], policy, &special, vocab, &mut rng);
    let mut report = PretrainReport::default();
    if !eval_set.is_empty() {
        report
            .eval_losses
            .push((0, evaluate_mlm(model, &eval_set)?));
    }

    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let (batch, _) = mask_batch(&picked, policy, &special, vocab, &mut rng);
        if batch.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let feats = vec![None; batch.len()];
        let loss = model.masked_lm_loss_graph(&mut g, &p, &batch, None, &feats)?;
        report.train_losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let params = model.params_mut()?;
        params.absorb_grads(&p, &grads)?;
        adam_step(params, &mut adam)?;

        if step % cfg.eval_every == 0 && !eval_set.is_empty() {
            report
                .eval_losses
                .push((step, evaluate_mlm(model, &eval_set)?));
        }
    }
    Ok(report)
}
