use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptation::MaskedSequence;
use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, Bound, Graph, ParamKind, ParameterSet, Tensor, Var, LN_EPS};
use crate::xadapter::{FeatureMatrix, InsertionPlan, ParamCount, PlanBinding};

use super::{SpecialIds, TokenSequence};

/// Dimensions of the host encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Output head shares the token embedding matrix.
    pub tie_head: bool,
    #[serde(default)]
    pub special: SpecialIds,
}

impl EncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_seq_len: 128,
            tie_head: true,
            special: SpecialIds::default(),
        }
    }

    /// Base-size BERT dimensions.
    pub fn reference() -> Self {
        EncoderConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_dim: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            tie_head: true,
            special: SpecialIds::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let ids = self.special.all();
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "special id {a} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            if ids[i + 1..].contains(a) {
                return Err(Error::Config(format!("special id {a} used twice")));
            }
        }
        Ok(())
    }

    /// Parameters of transformer layer `i` (0-based).
    pub fn layer_shapes(&self, i: usize) -> Vec<(String, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        let (d, f) = (self.d_model, self.ffn_dim);
        let p = |name: &str| format!("layers.{i}.{name}");
        vec![
            (p("attn.wq"), vec![d, d], Weight),
            (p("attn.bq"), vec![d], Bias),
            (p("attn.wk"), vec![d, d], Weight),
            (p("attn.bk"), vec![d], Bias),
            (p("attn.wv"), vec![d, d], Weight),
            (p("attn.bv"), vec![d], Bias),
            (p("attn.wo"), vec![d, d], Weight),
            (p("attn.bo"), vec![d], Bias),
            (p("attn_norm.gamma"), vec![d], Norm),
            (p("attn_norm.beta"), vec![d], Norm),
            (p("ffn.w_in"), vec![d, f], Weight),
            (p("ffn.b_in"), vec![f], Bias),
            (p("ffn.w_out"), vec![f, d], Weight),
            (p("ffn.b_out"), vec![d], Bias),
            (p("ffn_norm.gamma"), vec![d], Norm),
            (p("ffn_norm.beta"), vec![d], Norm),
        ]
    }

    /// Every parameter of the model, embeddings and head included.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        let d = self.d_model;
        let mut v = vec![
            (
                "embeddings.token".to_string(),
                vec![self.vocab_size, d],
                Embedding,
            ),
            (
                "embeddings.position".to_string(),
                vec![self.max_seq_len, d],
                Embedding,
            ),
            ("embeddings.token_type".to_string(), vec![2, d], Embedding),
            ("embeddings.norm.gamma".to_string(), vec![d], Norm),
            ("embeddings.norm.beta".to_string(), vec![d], Norm),
        ];
        for i in 0..self.n_layers {
            v.extend(self.layer_shapes(i));
        }
        if !self.tie_head {
            v.push(("head.weight".to_string(), vec![d, self.vocab_size], Weight));
        }
        v.push(("head.bias".to_string(), vec![self.vocab_size], Bias));
        v
    }

    /// Breakdown for one transformer layer.
    pub fn layer_count(&self) -> ParamCount {
        ParamCount::from_shapes(&self.layer_shapes(0))
    }

    /// Breakdown for the whole model.
    pub fn count(&self) -> ParamCount {
        ParamCount::from_shapes(&self.param_shapes())
    }
}

/// Weight-matrix entries of one transformer layer: `4·d² + 2·d·ffn`.
pub fn count_layer_weights(config: &EncoderConfig) -> usize {
    let (d, f) = (config.d_model, config.ffn_dim);
    4 * d * d + 2 * d * f
}

/// A post-norm transformer encoder with a masked-LM head.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParameterSet,
    frozen: bool,
}

impl EncoderModel {
    /// Embeddings drawn from N(0, 0.02²), Glorot-uniform matrices, zero
    /// biases, unit norms.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = ParameterSet::new();
        for (path, shape, kind) in config.param_shapes() {
            let t = match kind {
                ParamKind::Embedding => {
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| normal.sample(&mut rng))
                        .collect();
                    Tensor::new(shape.clone(), data)?
                }
                ParamKind::Weight => glorot_uniform(shape[0], shape[1], &mut rng),
                ParamKind::Norm if path.ends_with("gamma") => Tensor::filled(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            params.insert(path, t, kind, true);
        }
        Ok(EncoderModel {
            config,
            params,
            frozen: false,
        })
    }

    /// Rebuilds a model from stored tensors. The result is frozen.
    pub fn from_params(config: EncoderConfig, mut params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Format {
                kind: "model",
                reason: format!("expected {} tensors, found {}", shapes.len(), params.len()),
            });
        }
        for (path, shape, _) in &shapes {
            let t = params.get(path).ok_or_else(|| Error::Format {
                kind: "model",
                reason: format!("missing tensor {path}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "model parameter",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        params.freeze_all();
        Ok(EncoderModel {
            config,
            params,
            frozen: true,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Mutable access for training. Fails once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParameterSet> {
        if self.frozen {
            return Err(Error::contract("encoder is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.params.unfreeze_all();
        self.frozen = false;
    }

    /// SHA-256 of every base tensor.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::of(&self.params)
    }

    /// Summed token, position and type embeddings, layer-normalized.
    pub fn embed(&self, g: &mut Graph, p: &Bound, seq: &TokenSequence) -> Result<Var> {
        seq.validate(self.config.max_seq_len)?;
        if seq.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let vocab = self.config.vocab_size;
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                size: vocab,
            });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let types: Vec<usize> = seq.token_types.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(p.var("embeddings.token"), &ids)?;
        let pos = g.gather_rows(p.var("embeddings.position"), &positions)?;
        let typ = g.gather_rows(p.var("embeddings.token_type"), &types)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, typ)?;
        g.layer_norm(
            sum,
            p.var("embeddings.norm.gamma"),
            p.var("embeddings.norm.beta"),
            LN_EPS,
        )
    }

    /// Transformer layer `i` (0-based). Keys flagged false in `key_mask`
    /// receive no attention.
    pub fn layer(
        &self,
        g: &mut Graph,
        p: &Bound,
        i: usize,
        h: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        if i >= self.config.n_layers {
            return Err(Error::Index {
                what: "encoder layer",
                index: i,
                size: self.config.n_layers,
            });
        }
        let w = |name: &str| p.var(&format!("layers.{i}.{name}"));
        let q = g.linear(h, w("attn.wq"), w("attn.bq"))?;
        let k = g.linear(h, w("attn.wk"), w("attn.bk"))?;
        let v = g.linear(h, w("attn.wv"), w("attn.bv"))?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, Some(key_mask))?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let attended = g.linear(cat, w("attn.wo"), w("attn.bo"))?;
        let h1 = g.add(h, attended)?;
        let h1 = g.layer_norm(h1, w("attn_norm.gamma"), w("attn_norm.beta"), LN_EPS)?;
        let f = g.linear(h1, w("ffn.w_in"), w("ffn.b_in"))?;
        let f = g.gelu(f);
        let f = g.linear(f, w("ffn.w_out"), w("ffn.b_out"))?;
        let h2 = g.add(h1, f)?;
        g.layer_norm(h2, w("ffn_norm.gamma"), w("ffn_norm.beta"), LN_EPS)
    }

    /// Embedding plus every layer; when the plan holds an adapter at
    /// position `p` it runs on the hidden states entering layer `p`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        seq: &TokenSequence,
        adapters: Option<(&InsertionPlan, &PlanBinding)>,
        features: Option<&FeatureMatrix>,
    ) -> Result<Var> {
        if let Some((plan, _)) = adapters {
            self.check_plan(plan)?;
            if !plan.is_empty() && features.is_none() {
                return Err(Error::contract("adapter plan given without features"));
            }
        }
        let mut h = self.embed(g, p, seq)?;
        for i in 0..self.config.n_layers {
            if let Some((plan, binding)) = adapters {
                if let (Some(adapter), Some(bound)) = (plan.adapter(i + 1), binding.get(i + 1)) {
                    // checked above
                    let feats = features.expect("features present");
                    h = adapter.forward_graph(g, bound, h, feats)?;
                }
            }
            h = self.layer(g, p, i, h, &seq.attention)?;
        }
        Ok(h)
    }

    /// Rejects plans that reference layers this model does not have.
    pub fn check_plan(&self, plan: &InsertionPlan) -> Result<()> {
        let n = self.config.n_layers;
        if let Some(pos) = plan.positions().into_iter().find(|&q| q == 0 || q > n) {
            return Err(Error::Config(format!(
                "insertion position {pos} outside 1..={n}"
            )));
        }
        for (pos, adapter) in plan.iter() {
            if adapter.config().d_model != self.config.d_model {
                return Err(Error::Config(format!(
                    "adapter at {pos} has d_model {} but encoder has {}",
                    adapter.config().d_model,
                    self.config.d_model
                )));
            }
        }
        Ok(())
    }

    /// Masked-LM logits `[len×vocab]` for hidden states `[len×d]`.
    pub fn mlm_logits_graph(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<Var> {
        let logits = if self.config.tie_head {
            g.matmul_bt(hidden, p.var("embeddings.token"))?
        } else {
            g.matmul(hidden, p.var("head.weight"))?
        };
        g.add_row(logits, p.var("head.bias"))
    }

    /// Mean masked-LM loss over every selected position of `batch`, all
    /// sequences sharing one graph. `features[i]` feeds the adapters for
    /// sequence `i`.
    pub fn masked_lm_loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[MaskedSequence],
        adapters: Option<(&InsertionPlan, &PlanBinding)>,
        features: &[Option<&FeatureMatrix>],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if features.len() != batch.len() {
            return Err(Error::Dimension {
                op: "masked_lm_loss",
                left: vec![batch.len()],
                right: vec![features.len()],
            });
        }
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for (item, feats) in batch.iter().zip(features) {
            let h = self.encode_graph(g, p, &item.input, adapters, *feats)?;
            rows.push(self.mlm_logits_graph(g, p, h)?);
            targets.extend_from_slice(&item.targets);
            mask.extend_from_slice(&item.selected);
        }
        let logits = g.concat_rows(&rows)?;
        g.cross_entropy(logits, &targets, &mask)
    }

    /// Hidden states `[len×d]` for one sequence.
    pub fn encode(
        &self,
        seq: &TokenSequence,
        plan: Option<&InsertionPlan>,
        features: Option<&FeatureMatrix>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let binding = plan.map(|pl| pl.bind(&mut g));
        let adapters = plan.zip(binding.as_ref());
        let h = self.encode_graph(&mut g, &p, seq, adapters, features)?;
        Ok(g.value(h).clone())
    }

    /// Applies the output head to precomputed hidden states.
    pub fn mlm_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        if hidden.shape().len() != 2 || hidden.cols() != self.config.d_model {
            return Err(Error::Dimension {
                op: "mlm_logits",
                left: vec![self.config.d_model],
                right: hidden.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = g.constant(hidden.clone());
        let out = self.mlm_logits_graph(&mut g, &p, h)?;
        Ok(g.value(out).clone())
    }

    /// `encode` followed by `mlm_logits` in one graph.
    pub fn logits(
        &self,
        seq: &TokenSequence,
        plan: Option<&InsertionPlan>,
        features: Option<&FeatureMatrix>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let binding = plan.map(|pl| pl.bind(&mut g));
        let adapters = plan.zip(binding.as_ref());
        let h = self.encode_graph(&mut g, &p, seq, adapters, features)?;
        let out = self.mlm_logits_graph(&mut g, &p, h)?;
        Ok(g.value(out).clone())
    }
}
