use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, Bound, Graph, ParamKind, ParameterSet, Tensor, Var, LN_EPS};

use super::FeatureMatrix;

/// Dimensions of one adapter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Hidden width of the host encoder.
    pub d_model: usize,
    /// Adapter hidden width.
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Width of the external feature rows.
    pub feature_dim: usize,
    pub s_init: f64,
}

impl AdapterConfig {
    /// Small dimensions for tests and desk-scale runs.
    pub fn desk(d_model: usize) -> Self {
        AdapterConfig {
            d_model,
            hidden: 32,
            heads: 4,
            ffn_dim: 128,
            feature_dim: 16,
            s_init: 0.1,
        }
    }

    /// The full-size block used against a base-size encoder.
    pub fn reference() -> Self {
        AdapterConfig {
            d_model: 768,
            hidden: 512,
            heads: 8,
            ffn_dim: 2048,
            feature_dim: 512,
            s_init: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("adapter {name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "adapter hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.s_init.is_finite() {
            return Err(Error::Config("adapter s_init must be finite".into()));
        }
        Ok(())
    }

    /// Every parameter the block allocates: path, shape, kind.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        let (d, r, f, dc, dh) = (
            self.d_model,
            self.hidden,
            self.ffn_dim,
            self.feature_dim,
            self.head_dim(),
        );
        let mut v = vec![
            ("down.weight".to_string(), vec![d, r], Weight),
            ("down.bias".to_string(), vec![r], Bias),
            ("feature.weight".to_string(), vec![dc, r], Weight),
            ("feature.bias".to_string(), vec![r], Bias),
        ];
        for i in 0..self.heads {
            for proj in ["query", "key", "value"] {
                v.push((format!("heads.{i}.{proj}.weight"), vec![r, dh], Weight));
                v.push((format!("heads.{i}.{proj}.bias"), vec![dh], Bias));
            }
        }
        v.extend([
            ("attn_out.weight".to_string(), vec![r, r], Weight),
            ("attn_out.bias".to_string(), vec![r], Bias),
            ("attn_norm.gamma".to_string(), vec![r], Norm),
            ("attn_norm.beta".to_string(), vec![r], Norm),
            ("ffn.in.weight".to_string(), vec![r, f], Weight),
            ("ffn.in.bias".to_string(), vec![f], Bias),
            ("ffn.out.weight".to_string(), vec![f, r], Weight),
            ("ffn.out.bias".to_string(), vec![r], Bias),
            ("ffn_norm.gamma".to_string(), vec![r], Norm),
            ("ffn_norm.beta".to_string(), vec![r], Norm),
            ("up.weight".to_string(), vec![r, d], Weight),
            ("up.bias".to_string(), vec![d], Bias),
            ("scale".to_string(), vec![1], Scale),
            ("output_norm.gamma".to_string(), vec![d], Norm),
            ("output_norm.beta".to_string(), vec![d], Norm),
            ("type_embedding".to_string(), vec![2, r], Embedding),
        ]);
        v
    }
}

/// Breakdown of a parameter total by [`ParamKind`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
    pub norms: usize,
    pub embeddings: usize,
    pub scales: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.norms + self.embeddings + self.scales
    }

    pub fn add(&mut self, kind: ParamKind, n: usize) {
        match kind {
            ParamKind::Weight => self.weights += n,
            ParamKind::Bias => self.biases += n,
            ParamKind::Norm => self.norms += n,
            ParamKind::Embedding => self.embeddings += n,
            ParamKind::Scale => self.scales += n,
        }
    }

    pub fn from_shapes<'a, I>(shapes: I) -> Self
    where
        I: IntoIterator<Item = &'a (String, Vec<usize>, ParamKind)>,
    {
        let mut c = ParamCount::default();
        for (_, shape, kind) in shapes {
            c.add(*kind, shape.iter().product());
        }
        c
    }

    /// Counts what a parameter set actually holds.
    pub fn of(params: &ParameterSet) -> Self {
        let mut c = ParamCount::default();
        for (_, t, kind) in params.entries_with_kind() {
            c.add(kind, t.numel());
        }
        c
    }
}

/// Weight-matrix entries of one adapter, in closed form:
/// `d·r + d_c·r + 3·r·r + r·r + 2·r·ffn + r·d`.
pub fn count_adapter_params(config: &AdapterConfig) -> usize {
    let (d, r, f, dc) = (
        config.d_model,
        config.hidden,
        config.ffn_dim,
        config.feature_dim,
    );
    d * r + dc * r + 3 * r * r + r * r + 2 * r * f + r * d
}

/// One cross-attention adapter block.
#[derive(Clone, Debug)]
pub struct XAdapterLayer {
    config: AdapterConfig,
    params: ParameterSet,
}

impl XAdapterLayer {
    /// Glorot-uniform matrices, zero biases, unit norms, zero up-projection
    /// and `s = s_init`. With the up-projection at zero the block maps
    /// `x ↦ LN(x)` exactly.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (path, shape, kind) in config.param_shapes() {
            let t = match kind {
                ParamKind::Weight if path == "up.weight" => Tensor::zeros(&shape),
                ParamKind::Weight | ParamKind::Embedding => {
                    glorot_uniform(shape[0], shape[1], &mut rng)
                }
                ParamKind::Norm if path.ends_with("gamma") => Tensor::filled(&shape, 1.0),
                ParamKind::Scale => Tensor::filled(&shape, config.s_init),
                _ => Tensor::zeros(&shape),
            };
            params.insert(path, t, kind, true);
        }
        Ok(XAdapterLayer { config, params })
    }

    /// Rebuilds a layer from stored parameters, checking every shape.
    pub fn from_params(config: AdapterConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Format {
                kind: "adapter",
                reason: format!("expected {} tensors, found {}", shapes.len(), params.len()),
            });
        }
        for (path, shape, _) in &shapes {
            let t = params.get(path).ok_or_else(|| Error::Format {
                kind: "adapter",
                reason: format!("missing tensor {path}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "adapter parameter",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(XAdapterLayer { config, params })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn scale(&self) -> f64 {
        self.params.get("scale").map_or(0.0, Tensor::item)
    }

    pub fn set_scale(&mut self, s: f64) {
        if let Some(t) = self.params.get_mut("scale") {
            t.data_mut()[0] = s;
        }
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::of(&self.params)
    }

    fn check_features(&self, features: &FeatureMatrix) -> Result<()> {
        if features.is_empty() || features.valid_len() == 0 {
            return Err(Error::contract("adapter called without external features"));
        }
        if features.dim() != self.config.feature_dim {
            return Err(Error::Dimension {
                op: "adapter features",
                left: vec![self.config.feature_dim],
                right: features.rows().shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Multi-head cross-attention from projected queries `q: [len×r]` to
    /// the feature rows. Returns `[len×r]`.
    pub fn cross_attention_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        q: Var,
        features: &FeatureMatrix,
    ) -> Result<Var> {
        self.check_features(features)?;
        let r = self.config.hidden;
        if g.value(q).cols() != r {
            return Err(Error::Dimension {
                op: "cross_attention",
                left: vec![r],
                right: g.value(q).shape().to_vec(),
            });
        }
        let feats = g.constant(features.rows().clone());
        let projected = g.linear(feats, p.var("feature.weight"), p.var("feature.bias"))?;
        let key_input = match features.tags() {
            Some(tags) => {
                let ids: Vec<usize> = tags.iter().map(|&t| t as usize).collect();
                let type_rows = g.gather_rows(p.var("type_embedding"), &ids)?;
                g.add(projected, type_rows)?
            }
            None => projected,
        };
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let w = |name: &str| p.var(&format!("heads.{i}.{name}"));
            let qh = g.linear(q, w("query.weight"), w("query.bias"))?;
            let kh = g.linear(key_input, w("key.weight"), w("key.bias"))?;
            let vh = g.linear(projected, w("value.weight"), w("value.bias"))?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, Some(features.valid()))?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        g.linear(cat, p.var("attn_out.weight"), p.var("attn_out.bias"))
    }

    /// Full block on `x: [len×d]`:
    /// `ũ = LN(u + xW1)`, `m = LN(ũ + FFN(ũ))`, `x_out = LN(s·mW3 + x)`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        features: &FeatureMatrix,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if g.value(x).cols() != d {
            return Err(Error::Dimension {
                op: "adapter_forward",
                left: vec![d],
                right: g.value(x).shape().to_vec(),
            });
        }
        let down = g.linear(x, p.var("down.weight"), p.var("down.bias"))?;
        let attended = self.cross_attention_graph(g, p, down, features)?;
        let u = g.add(attended, down)?;
        let u = g.layer_norm(u, p.var("attn_norm.gamma"), p.var("attn_norm.beta"), LN_EPS)?;

        let hidden = g.linear(u, p.var("ffn.in.weight"), p.var("ffn.in.bias"))?;
        let hidden = g.gelu(hidden);
        let ffn = g.linear(hidden, p.var("ffn.out.weight"), p.var("ffn.out.bias"))?;
        let fused = g.add(u, ffn)?;
        let fused = g.layer_norm(
            fused,
            p.var("ffn_norm.gamma"),
            p.var("ffn_norm.beta"),
            LN_EPS,
        )?;

        let up = g.linear(fused, p.var("up.weight"), p.var("up.bias"))?;
        let gated = g.scale_by(p.var("scale"), up)?;
        let out = g.add(gated, x)?;
        g.layer_norm(
            out,
            p.var("output_norm.gamma"),
            p.var("output_norm.beta"),
            LN_EPS,
        )
    }

    /// Inference helper around [`Self::cross_attention_graph`].
    pub fn cross_attention(&self, q: &Tensor, features: &FeatureMatrix) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let q = g.constant(q.clone());
        let out = self.cross_attention_graph(&mut g, &p, q, features)?;
        Ok(g.value(out).clone())
    }

    /// Inference helper around [`Self::forward_graph`].
    pub fn forward(&self, x: &Tensor, features: &FeatureMatrix) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &p, x, features)?;
        Ok(g.value(out).clone())
    }
}
