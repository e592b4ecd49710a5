//! Binary containers for model and adapter weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "XAMD"
//! version   u32      1
//! kind      u16 length + UTF-8   ("MODEL" or "ADAPTER")
//! meta      u32 length + UTF-8 JSON
//! count     u64      number of tensors
//! tensor*   u16 name length, name, u8 kind, u8 ndim, ndim × u64 dims,
//!           numel × f64 values
//! crc       u32      CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{ParamKind, ParameterSet, Tensor};
use crate::xadapter::{AdapterConfig, ExpertKind, InsertionPlan, XAdapterLayer};

pub const MAGIC: [u8; 4] = *b"XAMD";
pub const VERSION: u32 = 1;

/// A decoded container before it is interpreted.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParameterSet,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Norm => 2,
        ParamKind::Embedding => 3,
        ParamKind::Scale => 4,
    }
}

fn kind_from(code: u8) -> Option<ParamKind> {
    Some(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::Norm,
        3 => ParamKind::Embedding,
        4 => ParamKind::Scale,
        _ => return None,
    })
}

pub fn encode_container(
    kind: &str,
    meta: &serde_json::Value,
    params: &ParameterSet,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind.len() as u16).to_le_bytes());
    out.extend_from_slice(kind.as_bytes());
    let meta = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor, kind) in params.entries_with_kind() {
        if name.len() > u16::MAX as usize {
            return Err(Error::contract(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind_code(kind));
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| fmt_err("name is not UTF-8"))
    }
}

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(fmt_err("file too short"));
    }
    if bytes[..4] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(fmt_err("CRC mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let kind_len = r.u16()? as usize;
    let kind = r.string(kind_len)?;
    let meta_len = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u64()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let kind = kind_from(r.u8()?).ok_or_else(|| fmt_err(format!("bad kind for {name}")))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| fmt_err("tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?, kind, false);
    }
    if r.pos != body.len() {
        return Err(fmt_err(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Container { kind, meta, params })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: EncoderConfig,
    vocab: Vec<String>,
}

/// Serializes a base model together with its vocabulary.
pub fn encode_model(model: &EncoderModel, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let meta = ModelMeta {
        config: model.config().clone(),
        vocab: vocab.words().to_vec(),
    };
    encode_container("MODEL", &serde_json::to_value(meta)?, model.params())
}

/// The model comes back frozen.
pub fn decode_model(bytes: &[u8]) -> Result<(EncoderModel, Vocabulary)> {
    let c = decode_container(bytes)?;
    if c.kind != "MODEL" {
        return Err(fmt_err(format!("expected MODEL section, found {}", c.kind)));
    }
    let meta: ModelMeta = serde_json::from_value(c.meta)?;
    let vocab = Vocabulary::from_words(meta.vocab.iter().skip(5));
    if vocab.words() != meta.vocab.as_slice() {
        return Err(fmt_err("stored vocabulary is not canonical"));
    }
    if vocab.len() != meta.config.vocab_size {
        return Err(fmt_err(format!(
            "vocabulary has {} words but config says {}",
            vocab.len(),
            meta.config.vocab_size
        )));
    }
    Ok((EncoderModel::from_params(meta.config, c.params)?, vocab))
}

pub fn save_model(path: &Path, model: &EncoderModel, vocab: &Vocabulary) -> Result<()> {
    write_file(path, &encode_model(model, vocab)?)
}

pub fn load_model(path: &Path) -> Result<(EncoderModel, Vocabulary)> {
    decode_model(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    config: AdapterConfig,
    expert: ExpertKind,
    positions: Vec<usize>,
}

/// Serializes every adapter of a plan; tensors are prefixed `pos{p}.`.
pub fn encode_adapters(plan: &InsertionPlan) -> Result<Vec<u8>> {
    let config = plan
        .iter()
        .next()
        .map(|(_, a)| a.config().clone())
        .ok_or_else(|| Error::contract("cannot save an empty plan"))?;
    let mut params = ParameterSet::new();
    for (pos, adapter) in plan.iter() {
        if adapter.config() != &config {
            return Err(Error::contract("adapters in one plan must share a config"));
        }
        for (name, t, kind) in adapter.params().entries_with_kind() {
            params.insert(format!("pos{pos}.{name}"), t.clone(), kind, false);
        }
    }
    let meta = AdapterMeta {
        config,
        expert: plan.kind(),
        positions: plan.positions(),
    };
    encode_container("ADAPTER", &serde_json::to_value(meta)?, &params)
}

/// Adapters come back trainable, as initialized ones are.
pub fn decode_adapters(bytes: &[u8]) -> Result<InsertionPlan> {
    let c = decode_container(bytes)?;
    if c.kind != "ADAPTER" {
        return Err(fmt_err(format!(
            "expected ADAPTER section, found {}",
            c.kind
        )));
    }
    let meta: AdapterMeta = serde_json::from_value(c.meta)?;
    let mut per_pos: BTreeMap<usize, ParameterSet> = meta
        .positions
        .iter()
        .map(|&p| (p, ParameterSet::new()))
        .collect();
    for (name, t, kind) in c.params.entries_with_kind() {
        let (head, rest) = name
            .split_once('.')
            .ok_or_else(|| fmt_err(format!("unprefixed tensor {name}")))?;
        let pos: usize = head
            .strip_prefix("pos")
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| fmt_err(format!("bad prefix in {name}")))?;
        let set = per_pos
            .get_mut(&pos)
            .ok_or_else(|| fmt_err(format!("tensor {name} for undeclared position")))?;
        set.insert(rest, t.clone(), kind, true);
    }
    let mut layers = BTreeMap::new();
    for (pos, params) in per_pos {
        layers.insert(
            pos,
            XAdapterLayer::from_params(meta.config.clone(), params)?,
        );
    }
    Ok(InsertionPlan::from_layers(meta.expert, layers))
}

pub fn save_adapters(path: &Path, plan: &InsertionPlan) -> Result<()> {
    write_file(path, &encode_adapters(plan)?)
}

pub fn load_adapters(path: &Path) -> Result<InsertionPlan> {
    decode_adapters(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xadapter::make_insertion_plan;

    fn tiny_model() -> (EncoderModel, Vocabulary) {
        let vocab = Vocabulary::from_words(["a", "b", "c"]);
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 8,
            vocab_size: vocab.len(),
            max_seq_len: 8,
            tie_head: false,
            special: Default::default(),
        };
        (EncoderModel::init(cfg, 1).unwrap(), vocab)
    }

    #[test]
    fn model_round_trip() {
        let (model, vocab) = tiny_model();
        let bytes = encode_model(&model, &vocab).unwrap();
        let (back, v2) = decode_model(&bytes).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(v2, vocab);
        assert!(back.is_frozen());
    }

    #[test]
    fn adapter_round_trip() {
        let mut cfg = AdapterConfig::desk(8);
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.ffn_dim = 8;
        cfg.feature_dim = 4;
        let plan = make_insertion_plan(&[1, 2], ExpertKind::Textual, 2, &cfg, 5).unwrap();
        let back = decode_adapters(&encode_adapters(&plan).unwrap()).unwrap();
        assert_eq!(back.checksum(), plan.checksum());
        assert_eq!(back.kind(), ExpertKind::Textual);
    }

    #[test]
    fn corruption_detected() {
        let (model, vocab) = tiny_model();
        let mut bytes = encode_model(&model, &vocab).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_model(&bytes), Err(Error::Format { .. })));
        bytes[mid] ^= 1;
        bytes.pop();
        assert!(decode_model(&bytes).is_err());
        let mut bad = encode_model(&model, &vocab).unwrap();
        bad[0] = b'Y';
        assert!(decode_model(&bad).is_err());
    }

    #[test]
    fn wrong_section_rejected() {
        let (model, vocab) = tiny_model();
        let bytes = encode_model(&model, &vocab).unwrap();
        assert!(decode_adapters(&bytes).is_err());
    }
}
