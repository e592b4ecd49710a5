use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adaptation::RetrievalSource;
use crate::encoder::{EncoderConfig, SpecialIds};
use crate::retrieval::FeatureBank;
use crate::textfeat::{EmbeddingProvider, StubProvider};
use crate::xadapter::{make_insertion_plan, AdapterConfig, ExpertKind};

fn vocab() -> Vocabulary {
    let mut words = vec![
        "the", "color", "of", "is", ".", "?", ":", "it", "a", "banana",
    ];
    words.extend(default_color_labels());
    Vocabulary::from_words(words)
}

fn model(v: &Vocabulary) -> EncoderModel {
    let cfg = EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        vocab_size: v.len(),
        max_seq_len: 32,
        tie_head: true,
        special: SpecialIds::default(),
    };
    let mut m = EncoderModel::init(cfg, 5).unwrap();
    m.freeze();
    m
}

fn stub_bank(provider: &StubProvider) -> FeatureBank {
    let rows = (0..12)
        .map(|i| {
            let v = provider.embed_text(&format!("row {i}")).unwrap();
            (format!("img{i}"), v.iter().map(|&x| x as f32).collect())
        })
        .collect();
    FeatureBank::build(rows, 8).unwrap()
}

#[test]
fn template_slot_counts() {
    assert!(PromptTemplate::new("The color of [ITEM] is [MASK].").is_ok());
    for bad in [
        "no slots",
        "[ITEM] only",
        "[MASK] only",
        "[ITEM] [ITEM] [MASK]",
        "[ITEM] [MASK] [MASK]",
    ] {
        assert!(
            matches!(PromptTemplate::new(bad), Err(Error::Template(_))),
            "{bad}"
        );
    }
    assert_eq!(builtin_templates().len(), 9);
}

#[test]
fn render_locates_mask() {
    let v = vocab();
    let t = PromptTemplate::new("The color of [ITEM] is [MASK].").unwrap();
    let r = t.render_prompt("a banana", &v).unwrap();
    assert_eq!(r.text, "The color of a banana is [MASK].");
    // [CLS] the color of a banana is [MASK] . [SEP]
    assert_eq!(r.mask_index, 7);
    assert_eq!(r.seq.ids[7], v.specials().mask);
    assert!(matches!(t.render("  "), Err(Error::Template(_))));
    // an item that smuggles in a second mask
    assert!(matches!(
        t.render_prompt("[mask]", &v),
        Err(Error::Template(_))
    ));
}

#[test]
fn label_validation() {
    let v = vocab();
    let l = LabelSet::new(&default_color_labels(), &v).unwrap();
    assert_eq!(l.len(), 11);
    assert_eq!(l.position("Grey"), Some(9));
    assert!(
        matches!(LabelSet::new(&["red", "mauve"], &v), Err(Error::UnknownLabel(w)) if w == "mauve")
    );
    assert!(matches!(
        LabelSet::new(&["red", "[mask]"], &v),
        Err(Error::UnknownLabel(_))
    ));
    assert!(matches!(
        LabelSet::new(&["red", "Red"], &v),
        Err(Error::Config(_))
    ));
    assert!(LabelSet::new::<&str>(&[], &v).is_err());
}

#[test]
fn file_parsers_skip_comments() {
    let pack =
        "# colors\nThe color of [ITEM] is [MASK].\n\n  # indented comment\n[ITEM] is [MASK].\n";
    assert_eq!(parse_prompt_pack(pack).unwrap().len(), 2);
    assert!(parse_prompt_pack("# nothing\n").is_err());
    assert!(matches!(
        parse_prompt_pack("bad line\n"),
        Err(Error::Template(_))
    ));
    assert_eq!(parse_label_file("red\n# x\n blue \n"), vec!["red", "blue"]);
}

#[test]
fn mask_logits_match_full_head_row() {
    let v = vocab();
    let m = model(&v);
    let labels = LabelSet::new(&["red", "blue", "green"], &v).unwrap();
    let r = builtin_templates()[4]
        .render_prompt("a banana", &v)
        .unwrap();
    let got = mask_logits(&m, None, &r.seq, None, &labels).unwrap();
    let full = m.logits(&r.seq, None, None).unwrap();
    for (g, &id) in got.iter().zip(labels.ids()) {
        assert_eq!(*g, full.at(r.mask_index, id as usize));
    }
}

#[test]
fn mask_logits_need_exactly_one_mask() {
    let v = vocab();
    let m = model(&v);
    let labels = LabelSet::new(&["red"], &v).unwrap();
    let none = v.encode_single("the color is red.");
    let two = v.encode_single("[MASK] is [MASK].");
    assert!(matches!(
        mask_logits(&m, None, &none, None, &labels),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        mask_logits(&m, None, &two, None, &labels),
        Err(Error::Contract(_))
    ));
}

#[test]
fn aggregation_is_mean_and_ties_go_first() {
    let rows = vec![vec![1.0, 4.0, 0.0], vec![3.0, 0.0, 0.0]];
    assert_eq!(aggregate_logits(&rows).unwrap(), vec![2.0, 2.0, 0.0]);
    assert_eq!(argmax_first(&[2.0, 2.0, 0.0]), 0);
    assert_eq!(argmax_first(&[0.0, 1.0, 1.0]), 1);
    assert!(aggregate_logits(&[]).is_err());
    assert!(aggregate_logits(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn classify_without_adapters_is_mean_of_template_rows() {
    let v = vocab();
    let m = model(&v);
    let labels = LabelSet::new(&default_color_labels(), &v).unwrap();
    let templates = builtin_templates();
    let reasoner = Reasoner {
        model: &m,
        vocab: &v,
        plan: None,
        source: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pred = reasoner
        .classify("a banana", &templates, &labels, &mut rng)
        .unwrap();

    let mut expected = vec![0.0; labels.len()];
    for t in &templates {
        let r = t.render_prompt("a banana", &v).unwrap();
        let full = m.logits(&r.seq, None, None).unwrap();
        for (j, &id) in labels.ids().iter().enumerate() {
            expected[j] += full.at(r.mask_index, id as usize) / templates.len() as f64;
        }
    }
    for (a, b) in pred.scores.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(pred.label, labels.labels()[argmax_first(&expected)]);
    assert_eq!(pred.per_template.len(), 9);
    assert!(reasoner
        .classify("a banana", &[], &labels, &mut rng)
        .is_err());
}

#[test]
fn adapters_need_a_source() {
    let v = vocab();
    let m = model(&v);
    let mut cfg = AdapterConfig::desk(16);
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.feature_dim = 8;
    let plan = make_insertion_plan(&[2], ExpertKind::Visual, 2, &cfg, 1).unwrap();
    let labels = LabelSet::new(&["red", "blue"], &v).unwrap();
    let t = &builtin_templates()[..1];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bare = Reasoner {
        model: &m,
        vocab: &v,
        plan: Some(&plan),
        source: None,
    };
    assert!(matches!(
        bare.classify("a banana", t, &labels, &mut rng),
        Err(Error::Contract(_))
    ));

    let provider = StubProvider::new(8, 0).unwrap();
    let bank = stub_bank(&provider);
    let source = RetrievalSource {
        bank: &bank,
        provider: &provider,
        k: 4,
    };
    let full = Reasoner {
        source: Some(&source),
        ..bare
    };
    let pred = full.classify("a banana", t, &labels, &mut rng).unwrap();
    assert_eq!(pred.scores.len(), 2);
}

#[test]
fn paired_features_tag_each_side() {
    let provider = StubProvider::new(8, 0).unwrap();
    let bank = stub_bank(&provider);
    let source = RetrievalSource {
        bank: &bank,
        provider: &provider,
        k: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = paired_features(&source, "a red bus.", "a green tree.", &mut rng).unwrap();
    assert_eq!(f.len(), 6);
    assert_eq!(f.tags().unwrap(), &[0, 0, 0, 1, 1, 1]);
}
