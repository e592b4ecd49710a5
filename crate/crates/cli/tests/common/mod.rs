#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use xadapter::retrieval::FeatureBank;
use xadapter::textfeat::{EmbeddingProvider, StubProvider};

pub fn xadapter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xadapter"))
        .args(args)
        .env_remove("XADAPTER_SEED")
        .output()
        .expect("binary runs")
}

pub fn stdout_records(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("stdout line is JSON"))
        .collect()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SUBJECTS: [&str; 6] = ["the bus", "a banana", "the sky", "grass", "snow", "coal"];
const COLORS: [&str; 6] = ["red", "yellow", "blue", "green", "white", "black"];

/// A desk-preset V-expert setup in `dir`: a 24-line corpus, a 60-row stub
/// bank of width 16, a label file and a config. Returns the config path.
pub fn desk_setup(dir: &Path, extra: Value) -> PathBuf {
    let corpus: Vec<String> = (0..24)
        .map(|i| {
            format!(
                "{} is {} . it is often {} in the picture .",
                SUBJECTS[i % 6],
                COLORS[i % 6],
                COLORS[(i + 1) % 6]
            )
        })
        .collect();
    std::fs::write(dir.join("corpus.txt"), corpus.join("\n") + "\n").unwrap();
    std::fs::write(dir.join("labels.txt"), COLORS.join("\n") + "\n").unwrap();

    let stub = StubProvider::new(16, 7).unwrap();
    let rows = (0..60)
        .map(|i| {
            (
                format!("img{i}"),
                stub.embed_text(&format!("image {i}")).unwrap(),
            )
        })
        .collect();
    FeatureBank::from_f64(rows, 16)
        .unwrap()
        .save(&dir.join("bank.xabk"))
        .unwrap();

    let mut cfg = json!({
        "model": "desk",
        "expert": "v",
        "epochs": 1,
        "lr": 1e-3,
        "seed": 3,
        "max_vocab": 100,
        "pretrain_steps": 10,
        "paths": {
            "bank": "bank.xabk",
            "corpus": "corpus.txt",
            "labels": "labels.txt",
        }
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Overwrites keys of `base` with those of `patch`, recursing into
/// objects; a `null` in the patch removes the key.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    b.remove(&k);
                } else {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
        }
        (b, p) => *b = p,
    }
}
