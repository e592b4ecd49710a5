//! A synthetic class task where the answer at `[MASK]` is only available
//! through retrieved features.
//!
//! Every item name is out of vocabulary, so the text alone is identical
//! across items. The bank holds, for every query sentence, `k` rows that
//! lie near the sentence's stub embedding and carry a direction that
//! identifies the item's class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    evaluate_batch, run_adaptation, AdaptationReport, AdaptationRun, FeatureSource, MaskAction,
    MaskedSequence, MaskingPolicy, RetrievalSource,
};
use crate::encoder::{
    pretrain_toy, EncoderConfig, EncoderModel, PretrainConfig, PretrainReport, SpecialIds,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::reasoning::{LabelSet, Prediction, PromptTemplate, Reasoner};
use crate::retrieval::FeatureBank;
use crate::textfeat::{EmbeddingProvider, StubProvider};
use crate::xadapter::{
    make_insertion_plan, AdapterConfig, ExpertKind, FeatureMatrix, InsertionPlan,
};

const TEMPLATES: [&str; 3] = [
    "The color of [ITEM] is [MASK].",
    "The usual color of [ITEM] is [MASK].",
    "[ITEM] usually has the color of [MASK].",
];

/// Words every planted vocabulary starts with (after the specials).
const CORE_WORDS: [&str; 8] = ["the", "color", "of", "is", "usual", "usually", "has", "."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub classes: Vec<String>,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub feature_dim: usize,
    pub adapter: AdapterConfig,
    pub positions: Vec<usize>,
    pub k: usize,
    pub train_items: usize,
    pub heldout_items: usize,
    /// Weight of the class direction in every planted row.
    pub strength: f64,
    /// Norm of the random jitter added to planted rows.
    pub jitter: f64,
    /// Unrelated random rows mixed into the bank.
    pub distractors: usize,
    pub pretrain_sentences: usize,
    /// Share of pretraining texts whose item is a class cue word.
    pub cue_share: f64,
    pub pretrain_mask_ratio: f64,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptationRun,
    pub adapter_seed: u64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            classes: ["red", "green", "blue", "yellow", "black", "white"]
                .map(String::from)
                .to_vec(),
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 64,
            feature_dim: 32,
            adapter: AdapterConfig {
                feature_dim: 32,
                ..AdapterConfig::desk(32)
            },
            positions: vec![2],
            k: 10,
            train_items: 120,
            heldout_items: 60,
            strength: 0.8,
            jitter: 0.05,
            distractors: 200,
            pretrain_sentences: 1200,
            cue_share: 0.7,
            pretrain_mask_ratio: 0.15,
            pretrain: PretrainConfig {
                steps: 2000,
                batch: 32,
                lr: 1e-3,
                seed: 1,
                eval_every: 250,
                eval_size: 64,
            },
            adapt: AdaptationRun {
                lr: 3e-3,
                epochs: 15,
                record_wall_clock: false,
                ..AdaptationRun::for_expert(ExpertKind::Visual)
            },
            adapter_seed: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedItem {
    pub name: String,
    pub class: usize,
}

/// Everything generated from one [`PlantedConfig`].
#[derive(Clone, Debug)]
pub struct PlantedTask {
    pub config: PlantedConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub templates: Vec<PromptTemplate>,
    pub provider: StubProvider,
    pub train: Vec<PlantedItem>,
    pub heldout: Vec<PlantedItem>,
    /// Adaptation texts: every template filled with a training item and
    /// its class word.
    pub corpus: Vec<String>,
    /// Texts for building the base model; item names there are random.
    pub pretrain_corpus: Vec<String>,
    pub bank: FeatureBank,
}

/// Accuracy of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEval {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Measurements of a full experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedOutcome {
    pub pretrain_final_loss: Option<f64>,
    pub cue_accuracy: f64,
    pub baseline_accuracy: f64,
    pub adapted_accuracy: f64,
    pub baseline_perplexity: f64,
    pub adapted_perplexity: f64,
    pub report: AdaptationReport,
}

fn orthonormal_directions(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if n > dim {
        return Err(Error::Config(format!(
            "{n} class directions do not fit in {dim} dimensions"
        )));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(out)
}

fn gaussian_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes.len() < 2 {
            problems.push("at least two classes are needed".to_string());
        }
        if !(0.0..=1.0).contains(&self.cue_share) {
            problems.push(format!("cue_share {} outside [0, 1]", self.cue_share));
        }
        if self.k == 0 {
            problems.push("k must be positive".into());
        }
        if self.train_items == 0 || self.heldout_items == 0 {
            problems.push("item counts must be positive".into());
        }
        let fixed = SpecialIds::default().all().len() + CORE_WORDS.len() + self.classes.len();
        if self.vocab_size < fixed {
            problems.push(format!(
                "vocab_size {} below the {fixed} required words",
                self.vocab_size
            ));
        }
        if self.adapter.d_model != self.d_model || self.adapter.feature_dim != self.feature_dim {
            problems.push("adapter dims disagree with d_model / feature_dim".into());
        }
        if self.classes.len() > self.feature_dim {
            problems.push("more classes than feature dimensions".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            max_seq_len: 32,
            tie_head: true,
            special: SpecialIds::default(),
        }
    }
}

impl PlantedTask {
    pub fn generate(config: PlantedConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_specials = SpecialIds::default().all().len();
        let filler_count = config.vocab_size - n_specials - CORE_WORDS.len() - config.classes.len();
        let fillers: Vec<String> = (0..filler_count).map(|i| format!("cue{i}")).collect();
        let vocab = Vocabulary::from_words(
            CORE_WORDS
                .iter()
                .map(|s| s.to_string())
                .chain(config.classes.iter().cloned())
                .chain(fillers.iter().cloned()),
        );
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "class words overlap the template words; vocabulary has {} entries",
                vocab.len()
            )));
        }
        let labels = LabelSet::new(&config.classes, &vocab)?;
        let templates: Vec<PromptTemplate> = TEMPLATES
            .iter()
            .map(|t| PromptTemplate::new(*t))
            .collect::<Result<_>>()?;

        let n_classes = config.classes.len();
        let mut balanced = |count: usize, offset: usize| {
            let mut classes: Vec<usize> = (0..count).map(|i| i % n_classes).collect();
            classes.shuffle(&mut rng);
            classes
                .into_iter()
                .enumerate()
                .map(|(i, class)| PlantedItem {
                    name: format!("thing{}", offset + i),
                    class,
                })
                .collect::<Vec<_>>()
        };
        let train = balanced(config.train_items, 0);
        let heldout = balanced(config.heldout_items, config.train_items);

        let corpus: Vec<String> = train
            .iter()
            .flat_map(|item| {
                let class = &config.classes[item.class];
                templates.iter().map(move |t| {
                    t.text()
                        .replace("[ITEM]", &item.name)
                        .replace("[MASK]", class)
                })
            })
            .collect();

        // Filler word i is a cue for class i mod C, so the base learns to
        // tell the classes apart from context. Unknown items get a random
        // class, leaving the base with no preference for them.
        let mut pretrain_corpus = Vec::with_capacity(config.pretrain_sentences);
        for _ in 0..config.pretrain_sentences {
            let t = &templates[rng.random_range(0..templates.len())];
            let (name, class) = if !fillers.is_empty() && rng.random_bool(config.cue_share) {
                let f = rng.random_range(0..fillers.len());
                (fillers[f].clone(), f % n_classes)
            } else {
                let name = format!("obj{}", rng.random_range(0..100_000));
                (name, rng.random_range(0..n_classes))
            };
            let class = &config.classes[class];
            pretrain_corpus.push(t.text().replace("[ITEM]", &name).replace("[MASK]", class));
        }

        let provider = StubProvider::new(config.feature_dim, config.seed)?;
        let directions = orthonormal_directions(n_classes, config.feature_dim, &mut rng)?;
        let mut rows: Vec<(String, Vec<f32>)> = Vec::new();
        let mut plant =
            |text: &str, class: usize, rows: &mut Vec<(String, Vec<f32>)>| -> Result<()> {
                let q = provider.embed_text(text)?;
                let tag = rows.len() / config.k;
                for j in 0..config.k {
                    let noise = gaussian_unit(config.feature_dim, &mut rng);
                    let v: Vec<f32> = (0..config.feature_dim)
                        .map(|d| {
                            (q[d]
                                + config.strength * directions[class][d]
                                + config.jitter * noise[d]) as f32
                        })
                        .collect();
                    rows.push((format!("q{tag}_{j}"), v));
                }
                Ok(())
            };
        for (text, item) in corpus.iter().zip(
            train
                .iter()
                .flat_map(|it| std::iter::repeat(it).take(TEMPLATES.len())),
        ) {
            plant(text, item.class, &mut rows)?;
        }
        for item in &heldout {
            for t in &templates {
                plant(&t.render(&item.name)?, item.class, &mut rows)?;
            }
        }
        for i in 0..config.distractors {
            let v = gaussian_unit(config.feature_dim, &mut rng);
            rows.push((
                format!("distractor{i}"),
                v.into_iter().map(|x| x as f32).collect(),
            ));
        }
        let bank = FeatureBank::build(rows, config.feature_dim)?;

        Ok(PlantedTask {
            config,
            vocab,
            labels,
            templates,
            provider,
            train,
            heldout,
            corpus,
            pretrain_corpus,
            bank,
        })
    }

    /// Trains a base model on the pretraining texts and freezes it.
    pub fn pretrain_base(&self) -> Result<(EncoderModel, PretrainReport)> {
        let mut model =
            EncoderModel::init(self.config.encoder_config(), self.config.pretrain.seed)?;
        let seqs: Vec<_> = self
            .pretrain_corpus
            .iter()
            .map(|t| self.vocab.encode_single(t))
            .collect();
        let policy = MaskingPolicy::new(self.config.pretrain_mask_ratio)?;
        let report = pretrain_toy(&mut model, &seqs, &policy, &self.config.pretrain)?;
        model.freeze();
        Ok((model, report))
    }

    /// Freshly initialized visual adapters at the configured positions.
    pub fn fresh_plan(&self) -> Result<InsertionPlan> {
        make_insertion_plan(
            &self.config.positions,
            ExpertKind::Visual,
            self.config.n_layers,
            &self.config.adapter,
            self.config.adapter_seed,
        )
    }

    pub fn source<'a>(&'a self, bank: &'a FeatureBank) -> RetrievalSource<'a> {
        RetrievalSource {
            bank,
            provider: &self.provider,
            k: self.config.k,
        }
    }

    pub fn adapt(
        &self,
        model: &EncoderModel,
        plan: &mut InsertionPlan,
        bank: &FeatureBank,
    ) -> Result<AdaptationReport> {
        run_adaptation(
            &self.config.adapt,
            model,
            &self.vocab,
            plan,
            &self.corpus,
            &self.source(bank),
        )
    }

    /// Zero-shot accuracy over the held-out items.
    pub fn evaluate(
        &self,
        model: &EncoderModel,
        plan: Option<&InsertionPlan>,
        bank: &FeatureBank,
    ) -> Result<PlantedEval> {
        let source = self.source(bank);
        let reasoner = Reasoner {
            model,
            vocab: &self.vocab,
            plan,
            source: Some(&source),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut correct = 0;
        let mut predictions = Vec::with_capacity(self.heldout.len());
        for item in &self.heldout {
            let p = reasoner.classify(&item.name, &self.templates, &self.labels, &mut rng)?;
            if p.label == self.config.classes[item.class] {
                correct += 1;
            }
            predictions.push(p);
        }
        Ok(PlantedEval {
            accuracy: correct as f64 / self.heldout.len() as f64,
            predictions,
        })
    }

    /// Perplexity of the class word at the `[MASK]` of every held-out
    /// prompt.
    pub fn heldout_perplexity(
        &self,
        model: &EncoderModel,
        plan: Option<&InsertionPlan>,
        bank: &FeatureBank,
    ) -> Result<f64> {
        let source = self.source(bank);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut batch = Vec::new();
        let mut features: Vec<FeatureMatrix> = Vec::new();
        for item in &self.heldout {
            for t in &self.templates {
                let prompt = t.render_prompt(&item.name, &self.vocab)?;
                let mut targets: Vec<usize> = prompt.seq.ids.iter().map(|&i| i as usize).collect();
                targets[prompt.mask_index] = self.labels.ids()[item.class] as usize;
                let mut selected = vec![false; prompt.seq.len()];
                selected[prompt.mask_index] = true;
                features.push(source.features(&prompt.text, &mut rng)?);
                batch.push(MaskedSequence {
                    input: prompt.seq,
                    targets,
                    selected,
                    actions: vec![(prompt.mask_index, MaskAction::Mask)],
                });
            }
        }
        Ok(evaluate_batch(model, plan, &batch, &features)?.exp())
    }

    /// Accuracy of the base alone on the in-vocabulary cue items, a check
    /// that pretraining taught it to separate the classes from context.
    pub fn cue_accuracy(&self, model: &EncoderModel) -> Result<f64> {
        let reasoner = Reasoner {
            model,
            vocab: &self.vocab,
            plan: None,
            source: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let n_classes = self.config.classes.len();
        let fillers = self.config.vocab_size
            - self.vocab.specials().all().len()
            - CORE_WORDS.len()
            - n_classes;
        let mut correct = 0;
        for f in 0..fillers {
            let p =
                reasoner.classify(&format!("cue{f}"), &self.templates, &self.labels, &mut rng)?;
            if p.label == self.config.classes[f % n_classes] {
                correct += 1;
            }
        }
        Ok(correct as f64 / fillers.max(1) as f64)
    }

    /// `item<TAB>class` lines for the held-out items.
    pub fn heldout_lines(&self) -> String {
        self.heldout
            .iter()
            .map(|it| format!("{}\t{}\n", it.name, self.config.classes[it.class]))
            .collect()
    }

    pub fn template_lines(&self) -> String {
        self.templates
            .iter()
            .map(|t| format!("{}\n", t.text()))
            .collect()
    }
}

/// Pretrains, measures the frozen baseline, adapts and measures again.
/// Returns the trained model and plan alongside the numbers.
pub fn run_planted(task: &PlantedTask) -> Result<(PlantedOutcome, EncoderModel, InsertionPlan)> {
    let (model, pre) = task.pretrain_base()?;
    let baseline = task.evaluate(&model, None, &task.bank)?;
    let baseline_perplexity = task.heldout_perplexity(&model, None, &task.bank)?;
    let mut plan = task.fresh_plan()?;
    let report = task.adapt(&model, &mut plan, &task.bank)?;
    let adapted = task.evaluate(&model, Some(&plan), &task.bank)?;
    let adapted_perplexity = task.heldout_perplexity(&model, Some(&plan), &task.bank)?;
    let outcome = PlantedOutcome {
        pretrain_final_loss: pre.final_eval(),
        cue_accuracy: task.cue_accuracy(&model)?,
        baseline_accuracy: baseline.accuracy,
        adapted_accuracy: adapted.accuracy,
        baseline_perplexity,
        adapted_perplexity,
        report,
    };
    Ok((outcome, model, plan))
}

/// Accuracy after adapting a fresh plan on `task.bank` doubled with
/// noisy copies, retrieving from the same noisy bank at test time.
pub fn run_noisy(
    task: &PlantedTask,
    model: &EncoderModel,
    sigma: f64,
    seed: u64,
) -> Result<(f64, FeatureBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = task.bank.inject_noise(sigma, &mut rng)?;
    let mut plan = task.fresh_plan()?;
    task.adapt(model, &mut plan, &noisy)?;
    Ok((task.evaluate(model, Some(&plan), &noisy)?.accuracy, noisy))
}
