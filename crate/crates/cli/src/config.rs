use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xadapter::adaptation::AdaptationRun;
use xadapter::encoder::{EncoderConfig, SpecialIds};
use xadapter::retrieval::FeatureBank;
use xadapter::textfeat::CHUNK_LIMIT;
use xadapter::xadapter::{AdapterConfig, ExpertKind};
use xadapter::{Error, Result};

pub const SEED_ENV: &str = "XADAPTER_SEED";

/// Base model dimensions: a preset name or explicit sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(Preset),
    Explicit {
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_dim: usize,
        #[serde(default = "default_max_len")]
        max_seq_len: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Reference,
}

fn default_max_len() -> usize {
    128
}

impl ModelSpec {
    /// Encoder configuration for a vocabulary of `vocab_size` words.
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        match *self {
            ModelSpec::Preset(Preset::Desk) => EncoderConfig::desk(vocab_size),
            ModelSpec::Preset(Preset::Reference) => EncoderConfig {
                vocab_size,
                ..EncoderConfig::reference()
            },
            ModelSpec::Explicit {
                d_model,
                n_layers,
                n_heads,
                ffn_dim,
                max_seq_len,
            } => EncoderConfig {
                d_model,
                n_layers,
                n_heads,
                ffn_dim,
                vocab_size,
                max_seq_len,
                tie_head: true,
                special: SpecialIds::default(),
            },
        }
    }
}

/// Where query embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderSpec {
    /// Hash-seeded pseudo-embeddings of width `adapter.feature_dim`.
    Stub { seed: u64 },
    /// Precomputed embeddings looked up by text.
    Bank { path: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub bank: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub adapter_checkpoint: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    pub expert: ExpertKind,
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Feature rows `L` for the textual expert.
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default)]
    pub mask_ratio: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adapter_seed: Option<u64>,
    #[serde(default = "default_vocab")]
    pub max_vocab: usize,
    #[serde(default)]
    pub pretrain_steps: Option<usize>,
    #[serde(default = "default_provider")]
    pub provider: ProviderSpec,
    /// Record wall-clock time in the metrics file.
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub paths: Paths,
}

fn default_k() -> usize {
    10
}
fn default_rows() -> usize {
    16
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_vocab() -> usize {
    2000
}
fn default_provider() -> ProviderSpec {
    ProviderSpec::Stub { seed: 0 }
}

/// Which inputs a command reads.
#[derive(Clone, Copy, Debug, Default)]
pub struct Needs {
    pub corpus: bool,
    pub base: bool,
    pub adapters: bool,
    pub features: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(cfg)
    }

    /// Makes every relative path relative to `dir` (the config's folder).
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = dir.join(&*path);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.bank,
            &mut paths.corpus,
            &mut paths.base_checkpoint,
            &mut paths.adapter_checkpoint,
            &mut paths.prompts,
            &mut paths.labels,
            &mut paths.output_dir,
        ] {
            fix(p);
        }
        if paths.output_dir.is_none() {
            paths.output_dir = Some(dir.to_path_buf());
        }
        if let ProviderSpec::Bank { path } = &mut self.provider {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }

    pub fn adapter_config(&self, d_model: usize) -> AdapterConfig {
        self.adapter
            .clone()
            .unwrap_or_else(|| AdapterConfig::desk(d_model))
    }

    pub fn run(&self) -> AdaptationRun {
        AdaptationRun {
            expert: self.expert,
            epochs: self.epochs.unwrap_or(self.expert.default_epochs()),
            batch_size: self.batch_size,
            lr: self.lr,
            mask_ratio: self.mask_ratio.unwrap_or(self.expert.default_mask_ratio()),
            seed: self.seed,
            record_wall_clock: self.wall_clock,
            metrics_path: None,
            checkpoint_path: None,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn base_path(&self) -> PathBuf {
        self.paths
            .base_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir().join("base.xamd"))
    }

    pub fn adapter_path(&self) -> PathBuf {
        self.paths
            .adapter_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir().join("adapters.xamd"))
    }

    /// Every violated field, or `Ok` when the config can run. `base` is the
    /// checkpoint's configuration when one has already been read; otherwise
    /// the model spec supplies the dimensions.
    pub fn validate(&self, needs: Needs, base: Option<&EncoderConfig>) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let mut need_file = |name: &str, path: &Option<PathBuf>, required: bool| match path {
            Some(p) if !p.is_file() => {
                problems.push(format!("{name}: {} does not exist", p.display()))
            }
            None if required => problems.push(format!("{name}: path is required")),
            _ => {}
        };
        need_file("corpus", &self.paths.corpus, needs.corpus);
        if needs.base {
            need_file("base_checkpoint", &Some(self.base_path()), true);
        }
        if needs.adapters {
            need_file("adapter_checkpoint", &Some(self.adapter_path()), true);
        }
        need_file("prompts", &self.paths.prompts, false);
        need_file("labels", &self.paths.labels, false);
        let visual = self.expert == ExpertKind::Visual;
        need_file("bank", &self.paths.bank, needs.features && visual);
        if let ProviderSpec::Bank { path } = &self.provider {
            if !path.is_file() {
                problems.push(format!("provider.path: {} does not exist", path.display()));
            }
        }

        let spec = self.model.encoder(SpecialIds::default().all().len() + 1);
        let (d, n_layers) = base.map_or((spec.d_model, spec.n_layers), |b| (b.d_model, b.n_layers));
        let adapter = self.adapter_config(d);
        if let Err(e) = adapter.validate() {
            problems.push(format!("adapter: {e}"));
        }
        if adapter.d_model != d {
            problems.push(format!(
                "adapter.d_model: {} but the base model has d = {d}",
                adapter.d_model
            ));
        }
        if let Some(pos) = &self.positions {
            if pos.is_empty() {
                problems.push("positions: empty".into());
            }
            for &p in pos {
                if p == 0 || p > n_layers {
                    problems.push(format!("positions: {p} outside 1..={n_layers}"));
                }
            }
        }
        if self.k == 0 {
            problems.push("k: must be at least 1".into());
        }
        if self.rows == 0 || self.rows > 2 * CHUNK_LIMIT {
            problems.push(format!(
                "rows: {} outside 1..={}",
                self.rows,
                2 * CHUNK_LIMIT
            ));
        }
        if let Some(m) = self.mask_ratio {
            if !(m > 0.0 && m < 1.0) {
                problems.push(format!("mask_ratio: {m} outside (0, 1)"));
            }
        }
        if self.epochs == Some(0) {
            problems.push("epochs: must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size: must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr: {} must be positive", self.lr));
        }
        if needs.features && visual {
            if let Some(p) = self.paths.bank.as_ref().filter(|p| p.is_file()) {
                match FeatureBank::load(p) {
                    Ok(bank) => {
                        if bank.dim() != adapter.feature_dim {
                            problems.push(format!(
                                "bank: dim {} but adapter.feature_dim is {}",
                                bank.dim(),
                                adapter.feature_dim
                            ));
                        }
                        if bank.len() < self.k {
                            problems.push(format!(
                                "bank: holds {} rows but k = {}",
                                bank.len(),
                                self.k
                            ));
                        }
                    }
                    Err(e) => problems.push(format!("bank: {e}")),
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid config:\n  {}",
                problems.join("\n  ")
            )))
        }
    }
}
