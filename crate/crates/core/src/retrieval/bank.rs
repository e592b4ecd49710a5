use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Suffix carried by perturbed copies made by [`FeatureBank::inject_noise`].
pub const NOISY_SUFFIX: &str = "#noisy";

/// Id-tagged embedding rows, kept raw (as stored on disk) and as unit
/// vectors for cosine search. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    ids: Vec<String>,
    raw: Vec<f32>,
    unit: Vec<f64>,
    index: HashMap<String, usize>,
}

impl FeatureBank {
    /// Bank from `(id, vector)` pairs in insertion order.
    pub fn build(entries: Vec<(String, Vec<f32>)>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("bank dim must be positive".into()));
        }
        let mut bank = FeatureBank {
            dim,
            ids: Vec::with_capacity(entries.len()),
            raw: Vec::with_capacity(entries.len() * dim),
            unit: Vec::with_capacity(entries.len() * dim),
            index: HashMap::with_capacity(entries.len()),
        };
        for (id, v) in entries {
            bank.push(id, &v)?;
        }
        Ok(bank)
    }

    /// Same as [`Self::build`] for `f64` input (values are stored as `f32`).
    pub fn from_f64(entries: Vec<(String, Vec<f64>)>, dim: usize) -> Result<Self> {
        Self::build(
            entries
                .into_iter()
                .map(|(id, v)| (id, v.into_iter().map(|x| x as f32).collect()))
                .collect(),
            dim,
        )
    }

    fn push(&mut self, id: String, v: &[f32]) -> Result<()> {
        let fail = |reason: String| Error::BankBuild {
            id: id.clone(),
            reason,
        };
        if v.len() != self.dim {
            return Err(fail(format!(
                "vector has {} values, bank dim is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(fail("vector has non-finite values".into()));
        }
        let norm = v
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(fail("zero vector".into()));
        }
        if self.index.contains_key(&id) {
            return Err(fail("duplicate id".into()));
        }
        if id.len() > u16::MAX as usize {
            return Err(fail("id longer than 65535 bytes".into()));
        }
        self.raw.extend_from_slice(v);
        self.unit.extend(v.iter().map(|&x| x as f64 / norm));
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn raw_row(&self, i: usize) -> &[f32] {
        &self.raw[i * self.dim..(i + 1) * self.dim]
    }

    /// Unit-normalized copy of row `i`.
    pub fn unit_row(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }

    /// SHA-256 of the serialized bank.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Exact top-`k` rows by cosine similarity, best first; equal scores
    /// keep bank order.
    pub fn cosine_topk(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                op: "cosine_topk",
                left: vec![self.dim],
                right: vec![query.len()],
            });
        }
        if k == 0 {
            return Err(Error::contract("top-k needs k >= 1"));
        }
        if k > self.len() {
            return Err(Error::contract(format!(
                "k = {k} exceeds bank size {}",
                self.len()
            )));
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::contract("query vector is zero or non-finite"));
        }
        let q: Vec<f64> = query.iter().map(|x| x / norm).collect();
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let s: f64 = self.unit_row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
                (i, s.clamp(-1.0, 1.0))
            })
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored)
    }

    /// Originals followed by one perturbed copy of every row: Gaussian
    /// noise with per-coordinate std `sigma / sqrt(dim)` added to the unit
    /// row, then re-normalized. Copies are named `<id>#noisy`.
    pub fn inject_noise<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma {sigma} must be positive"
            )));
        }
        let normal = Normal::new(0.0, sigma / (self.dim as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut out = self.clone();
        for i in 0..self.len() {
            let mut v: Vec<f64> = self
                .unit_row(i)
                .iter()
                .map(|&x| x + normal.sample(rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let raw: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            out.push(format!("{}{NOISY_SUFFIX}", self.ids[i]), &raw)?;
        }
        Ok(out)
    }
}

/// Id with any noisy-copy suffix removed.
pub fn base_id(id: &str) -> &str {
    id.strip_suffix(NOISY_SUFFIX).unwrap_or(id)
}

pub const XABK_MAGIC: [u8; 4] = [0x58, 0x41, 0x42, 0x4B];
pub const XABK_VERSION: u32 = 1;

fn bank_err(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "bank",
        reason: reason.into(),
    }
}

impl FeatureBank {
    /// XABK encoding: magic, u32 version, u32 dim, u64 count, records of
    /// (u16 id length, id bytes, dim × f32), then a CRC32 of everything
    /// before it. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.raw.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(&XABK_MAGIC);
        out.extend_from_slice(&XABK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.raw_row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 4 + 8;
        if bytes.len() < HEADER + 4 {
            return Err(bank_err(format!("file too short ({} bytes)", bytes.len())));
        }
        if bytes[..4] != XABK_MAGIC {
            return Err(bank_err("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bank_err(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != XABK_VERSION {
            return Err(bank_err(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(body[12..20].try_into().unwrap());
        let mut pos = HEADER;
        let mut entries = Vec::new();
        for r in 0..count {
            let mut take = |n: usize| -> Result<&[u8]> {
                let slice = body
                    .get(pos..pos + n)
                    .ok_or_else(|| bank_err(format!("record {r} truncated at byte {pos}")))?;
                pos += n;
                Ok(slice)
            };
            let id_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(take(id_len)?.to_vec())
                .map_err(|_| bank_err(format!("record {r} id is not UTF-8")))?;
            let v: Vec<f32> = take(4 * dim)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((id, v));
        }
        if pos != body.len() {
            return Err(bank_err(format!(
                "{} bytes left after {count} records of dim {dim}",
                body.len() - pos
            )));
        }
        Self::build(entries, dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(rows: &[&[f32]]) -> FeatureBank {
        let dim = rows[0].len();
        FeatureBank::build(
            rows.iter()
                .enumerate()
                .map(|(i, r)| (format!("e{}", i + 1), r.to_vec()))
                .collect(),
            dim,
        )
        .unwrap()
    }

    #[test]
    fn single_entry_is_own_neighbor() {
        let b = bank(&[&[3.0, 4.0]]);
        assert_eq!(b.len(), 1);
        let hits = b.cosine_topk(&[3.0, 4.0], 1).unwrap();
        assert_eq!(hits[0].0, 0);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_row_example() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let hits = b.cosine_topk(&[1.0, 0.0], 3).unwrap();
        let idx: Vec<usize> = hits.iter().map(|h| h.0).collect();
        assert_eq!(idx, vec![0, 2, 1]);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert!((hits[1].1 - 0.6).abs() < 1e-7);
        assert!(hits[2].1.abs() < 1e-12);
    }

    #[test]
    fn scaled_copy_scores_identically() {
        let b = bank(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[-1.0, 0.5, 0.0]]);
        let hits = b.cosine_topk(&[0.3, -0.2, 0.9], 3).unwrap();
        let s: HashMap<usize, f64> = hits.into_iter().collect();
        assert!((s[&0] - s[&1]).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rows_keep_bank_order() {
        let d: &[f32] = &[0.0, 1.0];
        let b = bank(&[&[1.0, 0.0], &[1.0, 1.0], d, &[1.0, -1.0], &[-1.0, 0.0], d]);
        let hits = b.cosine_topk(&[0.0, 2.0], 2).unwrap();
        assert_eq!((hits[0].0, hits[1].0), (2, 5));
    }

    #[test]
    fn build_errors_name_the_id() {
        let cases = vec![
            vec![
                ("a".to_string(), vec![1.0, 0.0]),
                ("a".to_string(), vec![0.0, 1.0]),
            ],
            vec![("z".to_string(), vec![0.0, 0.0])],
            vec![("short".to_string(), vec![1.0])],
        ];
        for (entries, want) in cases.into_iter().zip(["a", "z", "short"]) {
            match FeatureBank::build(entries, 2) {
                Err(Error::BankBuild { id, .. }) => assert_eq!(id, want),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn k_larger_than_bank_names_both_numbers() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let msg = b.cosine_topk(&[1.0, 0.0], 5).unwrap_err().to_string();
        assert!(msg.contains('5') && msg.contains('2'), "{msg}");
        assert!(b.cosine_topk(&[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let entries: Vec<(String, Vec<f32>)> = (0..100)
            .map(|i| {
                (
                    format!("row-{i}"),
                    (0..7).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let b = FeatureBank::build(entries, 7).unwrap();
        let back = FeatureBank::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back.ids(), b.ids());
        for i in 0..100 {
            let a: Vec<u32> = b.raw_row(i).iter().map(|v| v.to_bits()).collect();
            let c: Vec<u32> = back.raw_row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let good = b.to_bytes();
        let mut flipped = good.clone();
        flipped[22] ^= 0x40;
        assert!(FeatureBank::from_bytes(&flipped)
            .unwrap_err()
            .to_string()
            .contains("CRC"));
        assert!(FeatureBank::from_bytes(&good[..good.len() - 1]).is_err());
        let mut magic = good.clone();
        magic[0] = b'Y';
        assert!(FeatureBank::from_bytes(&magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn header_layout() {
        let b = bank(&[&[1.0, 0.0]]);
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"XABK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 20 + 2 + 2 + 8 + 4);
    }

    #[test]
    fn noise_doubles_and_tiny_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = bank(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let noisy = b.inject_noise(1e-8, &mut rng).unwrap();
        assert_eq!(noisy.len(), 4);
        assert_eq!(noisy.id(2), "e1#noisy");
        assert_eq!(base_id(noisy.id(3)), "e2");
        for i in 0..2 {
            let c: f64 = noisy
                .unit_row(i)
                .iter()
                .zip(noisy.unit_row(i + 2))
                .map(|(a, b)| a * b)
                .sum();
            assert!((c - 1.0).abs() < 1e-6);
        }
        assert!(b.inject_noise(0.0, &mut rng).is_err());
    }
}
