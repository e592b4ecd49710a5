use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use xadapter::accounting::params_report;
use xadapter::adaptation::{
    read_corpus, run_adaptation, AdaptationRun, ChunkSource, FeatureSource, MaskingPolicy,
    RetrievalSource,
};
use xadapter::bench::run_bench;
use xadapter::checkpoint::{load_adapters, load_model, save_model};
use xadapter::encoder::{pretrain_toy, EncoderConfig, EncoderModel, PretrainConfig, Vocabulary};
use xadapter::planted::{PlantedConfig, PlantedTask};
use xadapter::reasoning::{
    builtin_templates, default_color_labels, parse_label_file, parse_prompt_pack, LabelSet,
    PromptTemplate, Reasoner,
};
use xadapter::retrieval::FeatureBank;
use xadapter::textfeat::{BankProvider, EmbeddingProvider, StubProvider, TextFeatureAssembler};
use xadapter::xadapter::{make_insertion_plan, AdapterConfig, ExpertKind, InsertionPlan};
use xadapter::{Error, Result};

use crate::config::{ModelSpec, Needs, Preset, ProviderSpec, RunConfig};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        _ => 2,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Stamped into every stdout record as `"schema"`.
pub const SCHEMA_VERSION: u32 = 1;

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut value = serde_json::to_value(value)?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("schema".into(), json!(SCHEMA_VERSION));
    }
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, &value)?;
    writeln!(out).map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn bank_summary(bank: &FeatureBank) -> serde_json::Value {
    json!({ "records": bank.len(), "dim": bank.dim(), "checksum": bank.checksum() })
}

pub fn bank_build(csv_path: &Path, out: &Path) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| csv_err(csv_path, e))?;
    let mut rows = Vec::new();
    let mut dim = None;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(csv_path, e))?;
        let mut fields = record.iter();
        let Some(id) = fields.next().filter(|id| !id.is_empty()) else {
            continue;
        };
        let values = fields
            .map(|f| {
                f.parse::<f32>().map_err(|_| Error::BankBuild {
                    id: id.to_string(),
                    reason: format!("{f:?} is not a number"),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        dim.get_or_insert(values.len());
        rows.push((id.to_string(), values));
    }
    let Some(dim) = dim else {
        return Err(Error::Format {
            kind: "csv",
            reason: format!("{} holds no rows", csv_path.display()),
        });
    };
    let bank = FeatureBank::build(rows, dim)?;
    bank.save(out)?;
    log::info!("wrote {} rows to {}", bank.len(), out.display());
    print_json(&bank_summary(&bank))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return io_err(path, io);
        }
        unreachable!("io error without an io kind");
    }
    Error::Format {
        kind: "csv",
        reason: e.to_string(),
    }
}

pub fn bank_query(
    bank_path: &Path,
    vector: Option<&str>,
    text: Option<&str>,
    stub_seed: u64,
    k: usize,
) -> Result<()> {
    let bank = FeatureBank::load(bank_path)?;
    let query: Vec<f64> = match (vector, text) {
        (Some(v), _) => v
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("query value {x:?} is not a number")))
            })
            .collect::<Result<_>>()?,
        (None, Some(t)) => StubProvider::new(bank.dim(), stub_seed)?.embed_text(t)?,
        (None, None) => return Err(Error::Config("give --vector or --text".into())),
    };
    for (rank, (row, score)) in bank.cosine_topk(&query, k)?.into_iter().enumerate() {
        print_json(&json!({ "rank": rank + 1, "id": bank.id(row), "score": score }))?;
    }
    Ok(())
}

pub fn bank_augment(bank_path: &Path, out: &Path, sigma: f64, seed: u64) -> Result<()> {
    let bank = FeatureBank::load(bank_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = bank.inject_noise(sigma, &mut rng)?;
    noisy.save(out)?;
    print_json(&bank_summary(&noisy))
}

fn pretrain_base(cfg: &RunConfig) -> Result<(EncoderModel, Vocabulary)> {
    let corpus_path = cfg.paths.corpus.as_ref().expect("validated");
    let corpus = read_corpus(corpus_path)?;
    let vocab = Vocabulary::build(&corpus, cfg.max_vocab);
    let mut model = EncoderModel::init(cfg.model.encoder(vocab.len()), cfg.seed)?;
    let seqs: Vec<_> = corpus.iter().map(|t| vocab.encode_single(t)).collect();
    let pre = PretrainConfig {
        steps: cfg
            .pretrain_steps
            .unwrap_or(PretrainConfig::default().steps),
        seed: cfg.seed,
        ..PretrainConfig::default()
    };
    let report = pretrain_toy(&mut model, &seqs, &MaskingPolicy::new(0.15)?, &pre)?;
    model.freeze();
    let path = cfg.base_path();
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    save_model(&path, &model, &vocab)?;
    log::info!("base model saved to {}", path.display());
    print_json(&json!({
        "base_checkpoint": path,
        "vocab_size": vocab.len(),
        "steps": pre.steps,
        "final_eval_loss": report.final_eval(),
    }))?;
    Ok((model, vocab))
}

pub fn pretrain(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.validate(
        Needs {
            corpus: true,
            ..Needs::default()
        },
        None,
    )?;
    pretrain_base(&cfg).map(|_| ())
}

/// Owns whatever the feature source borrows.
struct Features {
    kind: ExpertKind,
    bank: Option<FeatureBank>,
    provider: Box<dyn EmbeddingProvider>,
    k: usize,
    rows: usize,
}

impl Features {
    fn open(cfg: &RunConfig, adapter: &AdapterConfig) -> Result<Self> {
        let provider: Box<dyn EmbeddingProvider> = match &cfg.provider {
            ProviderSpec::Stub { seed } => Box::new(StubProvider::new(adapter.feature_dim, *seed)?),
            ProviderSpec::Bank { path } => Box::new(BankProvider::new(FeatureBank::load(path)?)),
        };
        let bank = match (cfg.expert, &cfg.paths.bank) {
            (ExpertKind::Visual, Some(p)) => Some(FeatureBank::load(p)?),
            _ => None,
        };
        Ok(Features {
            kind: cfg.expert,
            bank,
            provider,
            k: cfg.k,
            rows: cfg.rows,
        })
    }

    fn source<'a>(&'a self, vocab: &'a Vocabulary) -> Result<Box<dyn FeatureSource + 'a>> {
        Ok(match self.kind {
            ExpertKind::Visual => Box::new(RetrievalSource {
                bank: self
                    .bank
                    .as_ref()
                    .ok_or_else(|| Error::Config("bank: path is required".into()))?,
                provider: self.provider.as_ref(),
                k: self.k,
            }),
            ExpertKind::Textual => Box::new(ChunkSource {
                vocab,
                provider: self.provider.as_ref(),
                assembler: TextFeatureAssembler::new(self.rows),
            }),
        })
    }
}

fn load_base(cfg: &RunConfig) -> Result<(EncoderModel, Vocabulary)> {
    let (mut model, vocab) = load_model(&cfg.base_path())?;
    model.freeze();
    Ok((model, vocab))
}

fn fresh_plan(cfg: &RunConfig, base: &EncoderConfig) -> Result<InsertionPlan> {
    let positions = cfg
        .positions
        .clone()
        .unwrap_or_else(|| cfg.expert.default_positions(base.n_layers));
    make_insertion_plan(
        &positions,
        cfg.expert,
        base.n_layers,
        &cfg.adapter_config(base.d_model),
        cfg.adapter_seed.unwrap_or(cfg.seed),
    )
}

pub fn adapt(config: &Path, pretrain_toy: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let needs = Needs {
        corpus: true,
        base: !pretrain_toy,
        features: true,
        ..Needs::default()
    };
    let (model, vocab) = if pretrain_toy && !cfg.base_path().is_file() {
        cfg.validate(needs, None)?;
        pretrain_base(&cfg)?
    } else {
        cfg.validate(
            Needs {
                base: true,
                ..needs
            },
            None,
        )?;
        let (model, vocab) = load_base(&cfg)?;
        cfg.validate(needs, Some(model.config()))?;
        (model, vocab)
    };
    let corpus = read_corpus(cfg.paths.corpus.as_ref().expect("validated"))?;
    let adapter_cfg = cfg.adapter_config(model.config().d_model);
    let features = Features::open(&cfg, &adapter_cfg)?;
    let source = features.source(&vocab)?;
    let mut plan = fresh_plan(&cfg, model.config())?;

    let out_dir = cfg.output_dir();
    create_dir(&out_dir)?;
    let adapter_path = cfg.adapter_path();
    let metrics_path = out_dir.join("metrics.jsonl");
    let run = AdaptationRun {
        metrics_path: Some(metrics_path.clone()),
        checkpoint_path: Some(adapter_path.clone()),
        ..cfg.run()
    };
    let report = run_adaptation(&run, &model, &vocab, &mut plan, &corpus, source.as_ref())?;
    print_json(&json!({
        "steps": report.steps,
        "final_loss": report.final_loss,
        "epoch_mean_loss": report.epoch_mean_loss,
        "base_checksum": report.base_checksum,
        "adapter_checksum": plan.checksum(),
        "adapter_checkpoint": adapter_path,
        "metrics": metrics_path,
    }))
}

fn load_templates(cfg: &RunConfig) -> Result<Vec<PromptTemplate>> {
    match &cfg.paths.prompts {
        Some(p) => parse_prompt_pack(&read_text(p)?),
        None => Ok(builtin_templates()),
    }
}

fn load_labels(cfg: &RunConfig, vocab: &Vocabulary) -> Result<LabelSet> {
    match &cfg.paths.labels {
        Some(p) => LabelSet::new(&parse_label_file(&read_text(p)?), vocab),
        None => LabelSet::new(&default_color_labels(), vocab),
    }
}

/// `item` or `item<TAB>gold` per line; blank lines and `#` comments skipped.
fn read_items(path: &Path) -> Result<Vec<(String, Option<String>)>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| match l.split_once('\t') {
            Some((item, gold)) => (item.trim().to_string(), Some(gold.trim().to_lowercase())),
            None => (l.to_string(), None),
        })
        .collect())
}

#[derive(Serialize)]
struct Score<'a> {
    label: &'a str,
    score: f64,
}

pub fn reason(config: &Path, item: Option<&str>, items: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let adapters_present = cfg.adapter_path().is_file();
    let needs = Needs {
        base: true,
        features: adapters_present,
        ..Needs::default()
    };
    cfg.validate(needs, None)?;
    let (model, vocab) = load_base(&cfg)?;
    cfg.validate(needs, Some(model.config()))?;

    let templates = load_templates(&cfg)?;
    let labels = load_labels(&cfg, &vocab)?;
    let list = match (item, items) {
        (Some(i), _) => vec![(i.to_string(), None)],
        (None, Some(p)) => read_items(p)?,
        (None, None) => return Err(Error::Config("give --item or --items".into())),
    };

    let plan = if adapters_present {
        let plan = load_adapters(&cfg.adapter_path())?;
        if plan.kind() != cfg.expert {
            return Err(Error::Config(format!(
                "adapter checkpoint holds {} adapters but expert is {}",
                plan.kind().as_str(),
                cfg.expert.as_str()
            )));
        }
        model.check_plan(&plan)?;
        Some(plan)
    } else {
        log::warn!(
            "no adapter checkpoint at {}; using the base alone",
            cfg.adapter_path().display()
        );
        None
    };
    let features = match &plan {
        Some(p) => Some(Features::open(
            &cfg,
            p.iter().next().expect("non-empty plan").1.config(),
        )?),
        None => None,
    };
    let source = features.as_ref().map(|f| f.source(&vocab)).transpose()?;
    let reasoner = Reasoner {
        model: &model,
        vocab: &vocab,
        plan: plan.as_ref(),
        source: source.as_deref(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut labelled, mut correct) = (0usize, 0usize);
    for (name, gold) in &list {
        let p = reasoner.classify(name, &templates, &labels, &mut rng)?;
        if let Some(g) = gold {
            labelled += 1;
            correct += usize::from(*g == p.label);
        }
        let scores: Vec<Score> = labels
            .labels()
            .iter()
            .zip(&p.scores)
            .map(|(label, &score)| Score { label, score })
            .collect();
        let mut record = json!({
            "item": p.item,
            "label": p.label,
            "scores": scores,
            "per_template": p.per_template,
        });
        if let Some(g) = gold {
            record["gold"] = json!(g);
        }
        print_json(&record)?;
    }
    let accuracy = (labelled > 0).then(|| correct as f64 / labelled as f64);
    print_json(&json!({
        "summary": {
            "items": list.len(),
            "labelled": labelled,
            "correct": correct,
            "accuracy": accuracy,
        }
    }))
}

pub fn bench(config: &Path, n: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let have_base = cfg.base_path().is_file();
    let needs = Needs {
        corpus: true,
        features: true,
        ..Needs::default()
    };
    cfg.validate(needs, None)?;
    let corpus = read_corpus(cfg.paths.corpus.as_ref().expect("validated"))?;
    let (model, vocab) = if have_base {
        let (model, vocab) = load_base(&cfg)?;
        cfg.validate(needs, Some(model.config()))?;
        (model, vocab)
    } else {
        log::info!("no base checkpoint; timing a randomly initialized model");
        let vocab = Vocabulary::build(&corpus, cfg.max_vocab);
        let mut model = EncoderModel::init(cfg.model.encoder(vocab.len()), cfg.seed)?;
        model.freeze();
        (model, vocab)
    };
    let plan = if cfg.adapter_path().is_file() {
        load_adapters(&cfg.adapter_path())?
    } else {
        fresh_plan(&cfg, model.config())?
    };
    model.check_plan(&plan)?;
    let adapter_cfg = plan
        .iter()
        .next()
        .map(|(_, a)| a.config().clone())
        .ok_or_else(|| Error::Config("adapter checkpoint is empty".into()))?;
    let features = Features::open(&cfg, &adapter_cfg)?;
    let source = features.source(&vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = run_bench(&model, &vocab, &plan, source.as_ref(), &corpus, n, &mut rng)?;
    print_json(&report)
}

pub fn params(
    config: Option<&Path>,
    preset: Option<Preset>,
    vocab: usize,
    adapters: Option<usize>,
) -> Result<()> {
    let (encoder, adapter, count) = match (config, preset) {
        (Some(path), _) => {
            let cfg = RunConfig::load(path)?;
            let encoder = if cfg.base_path().is_file() {
                load_model(&cfg.base_path())?.0.config().clone()
            } else {
                cfg.model.encoder(vocab)
            };
            let positions = cfg
                .positions
                .clone()
                .unwrap_or_else(|| cfg.expert.default_positions(encoder.n_layers));
            let adapter = cfg.adapter_config(encoder.d_model);
            (encoder, adapter, positions.len())
        }
        (None, Some(Preset::Reference)) => {
            (EncoderConfig::reference(), AdapterConfig::reference(), 1)
        }
        (None, Some(Preset::Desk)) => {
            let encoder = ModelSpec::Preset(Preset::Desk).encoder(vocab);
            let adapter = AdapterConfig::desk(encoder.d_model);
            (encoder, adapter, 1)
        }
        (None, None) => return Err(Error::Config("give --config or --preset".into())),
    };
    print_json(&params_report(
        &encoder,
        &adapter,
        adapters.unwrap_or(count),
    )?)
}

/// Seeds derived from one task seed, matching what the written config
/// reproduces.
pub fn planted_config(seed: u64) -> PlantedConfig {
    let mut cfg = PlantedConfig {
        seed,
        adapter_seed: seed.wrapping_add(2),
        ..PlantedConfig::default()
    };
    cfg.pretrain.seed = seed.wrapping_add(1);
    cfg.adapt.seed = seed;
    cfg
}

pub fn planted(out: &Path, seed: u64) -> Result<()> {
    let task = PlantedTask::generate(planted_config(seed))?;
    let c = &task.config;
    create_dir(out)?;
    log::info!("pretraining the planted base model");
    let (model, pre) = task.pretrain_base()?;
    let cue_accuracy = task.cue_accuracy(&model)?;

    let file = |name: &str| -> PathBuf { out.join(name) };
    save_model(&file("base.xamd"), &model, &task.vocab)?;
    task.bank.save(&file("bank.xabk"))?;
    write_text(&file("corpus.txt"), &(task.corpus.join("\n") + "\n"))?;
    write_text(&file("items.tsv"), &task.heldout_lines())?;
    write_text(&file("prompts.txt"), &task.template_lines())?;
    write_text(&file("labels.txt"), &(c.classes.join("\n") + "\n"))?;

    let run = RunConfig {
        model: ModelSpec::Explicit {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            max_seq_len: c.encoder_config().max_seq_len,
        },
        adapter: Some(c.adapter.clone()),
        expert: ExpertKind::Visual,
        positions: Some(c.positions.clone()),
        k: c.k,
        rows: TextFeatureAssembler::desk().max_rows,
        mask_ratio: Some(c.adapt.mask_ratio),
        epochs: Some(c.adapt.epochs),
        batch_size: c.adapt.batch_size,
        lr: c.adapt.lr,
        seed: c.seed,
        adapter_seed: Some(c.adapter_seed),
        max_vocab: c.vocab_size,
        pretrain_steps: None,
        provider: ProviderSpec::Stub { seed: c.seed },
        wall_clock: false,
        paths: crate::config::Paths {
            bank: Some("bank.xabk".into()),
            corpus: Some("corpus.txt".into()),
            base_checkpoint: Some("base.xamd".into()),
            adapter_checkpoint: Some("adapters.xamd".into()),
            prompts: Some("prompts.txt".into()),
            labels: Some("labels.txt".into()),
            output_dir: None,
        },
    };
    let text = serde_json::to_string_pretty(&run)?;
    write_text(&file("config.json"), &(text + "\n"))?;
    print_json(&json!({
        "out": out,
        "seed": seed,
        "pretrain_final_loss": pre.final_eval(),
        "cue_accuracy": cue_accuracy,
        "train_items": task.train.len(),
        "heldout_items": task.heldout.len(),
        "bank_rows": task.bank.len(),
    }))
}
