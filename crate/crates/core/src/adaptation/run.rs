use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{EncoderModel, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Graph};
use crate::retrieval::{retrieve_images, FeatureBank};
use crate::textfeat::{EmbeddingProvider, TextFeatureAssembler};
use crate::xadapter::{ExpertKind, FeatureMatrix, InsertionPlan};

use super::{mask_sequence, MaskedSequence, MaskingPolicy};

/// Produces the external features paired with one training text.
pub trait FeatureSource: Sync {
    fn features(&self, text: &str, rng: &mut dyn RngCore) -> Result<FeatureMatrix>;
}

/// Retrieved bank rows (visual expert).
pub struct RetrievalSource<'a> {
    pub bank: &'a FeatureBank,
    pub provider: &'a dyn EmbeddingProvider,
    pub k: usize,
}

impl FeatureSource for RetrievalSource<'_> {
    fn features(&self, text: &str, rng: &mut dyn RngCore) -> Result<FeatureMatrix> {
        retrieve_images(self.bank, text, self.k, self.provider, rng)?.features(self.bank)
    }
}

/// Chunked text embeddings (textual expert).
pub struct ChunkSource<'a> {
    pub vocab: &'a Vocabulary,
    pub provider: &'a dyn EmbeddingProvider,
    pub assembler: TextFeatureAssembler,
}

impl FeatureSource for ChunkSource<'_> {
    fn features(&self, text: &str, _rng: &mut dyn RngCore) -> Result<FeatureMatrix> {
        self.assembler
            .assemble(text, self.vocab, self.provider)?
            .to_feature_matrix()
    }
}

/// One Adam state per adapter position.
#[derive(Clone, Debug)]
pub struct PlanOptimizer {
    lr: f64,
    states: BTreeMap<usize, AdamState>,
}

impl PlanOptimizer {
    pub fn new(lr: f64) -> Self {
        PlanOptimizer {
            lr,
            states: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn state(&mut self, position: usize) -> &mut AdamState {
        let lr = self.lr;
        self.states
            .entry(position)
            .or_insert_with(|| AdamState::new(lr))
    }
}

/// Forward, backward and one optimizer update of every adapter on a
/// masked batch. Returns the batch loss. The base is never written.
pub fn adaptation_step(
    model: &EncoderModel,
    plan: &mut InsertionPlan,
    batch: &[MaskedSequence],
    features: &[FeatureMatrix],
    optimizer: &mut PlanOptimizer,
) -> Result<f64> {
    if !model.is_frozen() {
        return Err(Error::contract("adaptation requires a frozen base model"));
    }
    if plan.is_empty() {
        return Err(Error::contract("adaptation needs at least one adapter"));
    }
    if features.len() != batch.len() {
        return Err(Error::Dimension {
            op: "adaptation_step",
            left: vec![batch.len()],
            right: vec![features.len()],
        });
    }
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let binding = plan.bind(&mut g);
    let feats: Vec<Option<&FeatureMatrix>> = features.iter().map(Some).collect();
    let loss = model.masked_lm_loss_graph(&mut g, &p, batch, Some((&*plan, &binding)), &feats)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    for (pos, adapter) in plan.iter_mut() {
        let bound = binding.get(pos).expect("every adapter was bound");
        adapter.params_mut().absorb_grads(bound, &grads)?;
        adam_step(adapter.params_mut(), optimizer.state(pos))?;
    }
    Ok(value)
}

/// Mean masked-LM loss with the adapters in place, without updating.
pub fn evaluate_batch(
    model: &EncoderModel,
    plan: Option<&InsertionPlan>,
    batch: &[MaskedSequence],
    features: &[FeatureMatrix],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let binding = plan.map(|pl| pl.bind(&mut g));
    let feats: Vec<Option<&FeatureMatrix>> = features.iter().map(Some).collect();
    let loss = model.masked_lm_loss_graph(&mut g, &p, batch, plan.zip(binding.as_ref()), &feats)?;
    Ok(g.value(loss).item())
}

/// Settings of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRun {
    pub expert: ExpertKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    /// When false every `wall_ms` is written as 0 so that reruns produce
    /// identical metrics files.
    #[serde(default = "default_true")]
    pub record_wall_clock: bool,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl AdaptationRun {
    /// Defaults for an expert: its mask ratio and epoch count, lr 1e-4,
    /// batch 8.
    pub fn for_expert(expert: ExpertKind) -> Self {
        AdaptationRun {
            expert,
            epochs: expert.default_epochs(),
            batch_size: 8,
            lr: 1e-4,
            mask_ratio: expert.default_mask_ratio(),
            seed: 0,
            record_wall_clock: true,
            metrics_path: None,
            checkpoint_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        MaskingPolicy::new(self.mask_ratio).map(|_| ())
    }

    pub fn steps_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch_size)
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub records: Vec<MetricRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub steps: usize,
    pub final_loss: f64,
    pub wall_ms: u64,
    pub base_checksum: String,
}

impl AdaptationReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Reads one training text per non-empty line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// `[CLS] text [SEP]`, cut to the model's maximum length.
pub fn encode_for_model(vocab: &Vocabulary, model: &EncoderModel, text: &str) -> TokenSequence {
    let max = model.config().max_seq_len;
    let mut seq = vocab.encode_single(text);
    if seq.len() > max {
        log::warn!("sequence of {} tokens cut to {max}", seq.len());
        seq.ids.truncate(max);
        seq.token_types.truncate(max);
        seq.attention.truncate(max);
        if let Some(last) = seq.ids.last_mut() {
            *last = vocab.specials().sep;
        }
    }
    seq
}

struct Prepared {
    epoch: usize,
    batch: Vec<MaskedSequence>,
    features: Vec<FeatureMatrix>,
}

/// Trains the adapters of `plan` over `corpus` for `run.epochs` epochs.
///
/// A producer thread tokenizes, masks and fetches features for upcoming
/// batches while this thread trains; the queue holds at most two batches.
/// Both sides draw from their own seeded generators, so results depend
/// only on `run.seed`.
pub fn run_adaptation(
    run: &AdaptationRun,
    model: &EncoderModel,
    vocab: &Vocabulary,
    plan: &mut InsertionPlan,
    corpus: &[String],
    source: &dyn FeatureSource,
) -> Result<AdaptationReport> {
    run.validate()?;
    if !model.is_frozen() {
        return Err(Error::contract("adaptation requires a frozen base model"));
    }
    if corpus.is_empty() {
        return Err(Error::contract("empty adaptation corpus"));
    }
    if plan.kind() != run.expert {
        return Err(Error::Config(format!(
            "plan holds {} adapters but the run is for {}",
            plan.kind().as_str(),
            run.expert.as_str()
        )));
    }
    model.check_plan(plan)?;
    let policy = MaskingPolicy::new(run.mask_ratio)?;
    let base_checksum = model.checksum();
    let special = model.config().special;
    let vocab_size = model.config().vocab_size;
    let started = Instant::now();
    let mut optimizer = PlanOptimizer::new(run.lr);
    let mut records = Vec::new();
    let mut epoch_mean_loss = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Prepared>>(2);
        scope.spawn(move || {
            let mut order_rng = ChaCha8Rng::seed_from_u64(run.seed);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x6d61_736b);
            let mut feat_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x6665_6174);
            for epoch in 0..run.epochs {
                let mut order: Vec<usize> = (0..corpus.len()).collect();
                order.shuffle(&mut order_rng);
                for chunk in order.chunks(run.batch_size) {
                    let prepared = (|| -> Result<Prepared> {
                        let mut batch = Vec::with_capacity(chunk.len());
                        let mut features = Vec::with_capacity(chunk.len());
                        for &i in chunk {
                            let seq = encode_for_model(vocab, model, &corpus[i]);
                            let Some(masked) =
                                mask_sequence(&seq, &policy, &special, vocab_size, &mut mask_rng)
                            else {
                                log::warn!("corpus line {i} has no maskable tokens; skipped");
                                continue;
                            };
                            features.push(source.features(&corpus[i], &mut feat_rng)?);
                            batch.push(masked);
                        }
                        Ok(Prepared {
                            epoch,
                            batch,
                            features,
                        })
                    })();
                    let failed = prepared.is_err();
                    if tx.send(prepared).is_err() || failed {
                        return;
                    }
                }
            }
        });

        let mut step = 0;
        let mut epoch_sum = vec![0.0; run.epochs];
        let mut epoch_n = vec![0usize; run.epochs];
        for prepared in rx {
            let Prepared {
                epoch,
                batch,
                features,
            } = prepared?;
            if batch.is_empty() {
                continue;
            }
            let loss = adaptation_step(model, plan, &batch, &features, &mut optimizer)?;
            step += 1;
            epoch_sum[epoch] += loss;
            epoch_n[epoch] += 1;
            let wall_ms = if run.record_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            log::debug!("step {step} epoch {epoch} loss {loss:.6}");
            records.push(MetricRecord {
                step,
                epoch,
                loss,
                lr: run.lr,
                wall_ms,
            });
        }
        epoch_mean_loss = epoch_sum
            .iter()
            .zip(&epoch_n)
            .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect();
        Ok(())
    })?;

    if model.checksum() != base_checksum {
        return Err(Error::contract("base parameters changed during adaptation"));
    }
    let report = AdaptationReport {
        steps: records.len(),
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        wall_ms: if run.record_wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
        records,
        epoch_mean_loss,
        base_checksum,
    };
    if let Some(path) = &run.metrics_path {
        write_metrics(path, &report.records)?;
    }
    if let Some(path) = &run.checkpoint_path {
        checkpoint::save_adapters(path, plan)?;
    }
    Ok(report)
}

/// Writes one JSON object per line.
pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
