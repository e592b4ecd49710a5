use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{EncoderConfig, EncoderModel, SpecialIds, Vocabulary};
use crate::retrieval::FeatureBank;
use crate::textfeat::{StubProvider, TextFeatureAssembler};
use crate::xadapter::{make_insertion_plan, AdapterConfig, ExpertKind, InsertionPlan};

struct Fixture {
    vocab: Vocabulary,
    model: EncoderModel,
    bank: FeatureBank,
    provider: StubProvider,
    corpus: Vec<String>,
}

fn fixture() -> Fixture {
    let words = [
        "a", "red", "bus", "green", "tree", "the", "sky", "is", "blue", ".",
    ];
    let vocab = Vocabulary::from_words(words);
    let cfg = EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        tie_head: true,
        special: SpecialIds::default(),
    };
    let mut model = EncoderModel::init(cfg, 11).unwrap();
    model.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bank = FeatureBank::build(
        (0..40)
            .map(|i| {
                (
                    format!("img{i}"),
                    (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect(),
        8,
    )
    .unwrap();
    let corpus = (0..10)
        .map(|i| {
            let w = words[i % 5];
            format!("the sky is {w}. a {w} bus.")
        })
        .collect();
    Fixture {
        vocab,
        model,
        bank,
        provider: StubProvider::new(8, 0).unwrap(),
        corpus,
    }
}

fn plan(kind: ExpertKind) -> InsertionPlan {
    let mut cfg = AdapterConfig::desk(16);
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.feature_dim = 8;
    make_insertion_plan(&kind.default_positions(2), kind, 2, &cfg, 4).unwrap()
}

fn run_cfg() -> AdaptationRun {
    AdaptationRun {
        epochs: 1,
        batch_size: 2,
        lr: 1e-3,
        ..AdaptationRun::for_expert(ExpertKind::Visual)
    }
}

#[test]
fn ten_sentences_batch_two_is_five_steps() {
    let f = fixture();
    let mut p = plan(ExpertKind::Visual);
    let source = RetrievalSource {
        bank: &f.bank,
        provider: &f.provider,
        k: 4,
    };
    let report =
        run_adaptation(&run_cfg(), &f.model, &f.vocab, &mut p, &f.corpus, &source).unwrap();
    assert_eq!(report.steps, 5);
    assert_eq!(report.records.len(), run_cfg().steps_per_epoch(10));
    assert_eq!(report.base_checksum, f.model.checksum());
}

#[test]
fn same_seed_same_history() {
    let f = fixture();
    let source = RetrievalSource {
        bank: &f.bank,
        provider: &f.provider,
        k: 4,
    };
    let mut cfg = run_cfg();
    cfg.epochs = 2;
    cfg.record_wall_clock = false;
    let mut a = plan(ExpertKind::Visual);
    let mut b = plan(ExpertKind::Visual);
    let ra = run_adaptation(&cfg, &f.model, &f.vocab, &mut a, &f.corpus, &source).unwrap();
    let rb = run_adaptation(&cfg, &f.model, &f.vocab, &mut b, &f.corpus, &source).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn textual_expert_runs_on_chunks() {
    let f = fixture();
    let source = ChunkSource {
        vocab: &f.vocab,
        provider: &f.provider,
        assembler: TextFeatureAssembler::new(4),
    };
    let mut p = plan(ExpertKind::Textual);
    assert_eq!(p.positions(), vec![1, 2]);
    let cfg = AdaptationRun {
        expert: ExpertKind::Textual,
        ..run_cfg()
    };
    let before = p.checksum();
    let report = run_adaptation(&cfg, &f.model, &f.vocab, &mut p, &f.corpus, &source).unwrap();
    assert_eq!(report.steps, 5);
    assert_ne!(p.checksum(), before);
}

#[test]
fn step_moves_adapters_not_base() {
    let f = fixture();
    let mut p = plan(ExpertKind::Visual);
    let source = RetrievalSource {
        bank: &f.bank,
        provider: &f.provider,
        k: 4,
    };
    let policy = MaskingPolicy::new(0.45).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seqs: Vec<_> = f.corpus[..3]
        .iter()
        .map(|t| encode_for_model(&f.vocab, &f.model, t))
        .collect();
    let (batch, _) = mask_batch(
        &seqs,
        &policy,
        &SpecialIds::default(),
        f.vocab.len(),
        &mut rng,
    );
    let feats: Vec<_> = f.corpus[..3]
        .iter()
        .map(|t| source.features(t, &mut rng).unwrap())
        .collect();
    let base = f.model.checksum();
    let adapters = p.checksum();
    let mut opt = PlanOptimizer::new(1e-4);
    let loss = adaptation_step(&f.model, &mut p, &batch, &feats, &mut opt).unwrap();
    assert!(loss > 0.0);
    assert_eq!(f.model.checksum(), base);
    assert_ne!(p.checksum(), adapters);
}

#[test]
fn unfrozen_base_rejected() {
    let mut f = fixture();
    f.model.unfreeze();
    let mut p = plan(ExpertKind::Visual);
    let source = RetrievalSource {
        bank: &f.bank,
        provider: &f.provider,
        k: 4,
    };
    let err =
        run_adaptation(&run_cfg(), &f.model, &f.vocab, &mut p, &f.corpus, &source).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
    let err =
        adaptation_step(&f.model, &mut p, &[], &[], &mut PlanOptimizer::new(1e-4)).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
}

#[test]
fn metrics_and_checkpoint_written() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = run_cfg();
    cfg.metrics_path = Some(dir.path().join("metrics.jsonl"));
    cfg.checkpoint_path = Some(dir.path().join("adapters.xamd"));
    let mut p = plan(ExpertKind::Visual);
    let source = RetrievalSource {
        bank: &f.bank,
        provider: &f.provider,
        k: 4,
    };
    run_adaptation(&cfg, &f.model, &f.vocab, &mut p, &f.corpus, &source).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let recs: Vec<MetricRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 5);
    assert_eq!(recs[4].step, 5);
    let back = crate::checkpoint::load_adapters(&dir.path().join("adapters.xamd")).unwrap();
    assert_eq!(back.checksum(), p.checksum());
}

#[test]
fn missing_corpus_is_io_error() {
    let err = read_corpus(std::path::Path::new("/nonexistent/corpus.txt")).unwrap_err();
    assert!(matches!(err, crate::Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/corpus.txt"));
}
