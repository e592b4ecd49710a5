use crate::error::{Error, Result};
use crate::retrieval::FeatureBank;

/// Source of fixed-width text embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Output width.
    fn dim(&self) -> usize;

    /// Pooled embedding of a whole string.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    /// Pooled embedding of a token-id chunk.
    fn embed_ids(&self, ids: &[u32]) -> Result<Vec<f64>>;

    /// One row per token of `ids`.
    fn embed_ids_per_token(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        ids.iter().map(|&id| self.embed_ids(&[id])).collect()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-embeddings: a unit vector generated by splitmix64
/// from the FNV-1a hash of the input bytes, XOR-ed with a seed. Strings
/// hash their UTF-8 bytes; id chunks hash each id as four little-endian
/// bytes. Bit-exact on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StubProvider {
    dim: usize,
    seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("provider dim must be positive".into()));
        }
        Ok(StubProvider { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn vector_for(&self, key: u64) -> Vec<f64> {
        let mut state = key ^ self.seed;
        loop {
            let v: Vec<f64> = (0..self.dim)
                .map(|_| {
                    let bits = splitmix64(&mut state) >> 11;
                    2.0 * (bits as f64 / (1u64 << 53) as f64) - 1.0
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

impl EmbeddingProvider for StubProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.vector_for(fnv1a64(text.as_bytes())))
    }

    fn embed_ids(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let bytes: Vec<u8> = ids.iter().flat_map(|i| i.to_le_bytes()).collect();
        Ok(self.vector_for(fnv1a64(&bytes)))
    }
}

/// Looks embeddings up in a bank of precomputed vectors. Strings are keyed
/// by their text; id chunks by `ids:` followed by the comma-joined ids.
#[derive(Clone, Debug)]
pub struct BankProvider {
    bank: FeatureBank,
}

impl BankProvider {
    pub fn new(bank: FeatureBank) -> Self {
        BankProvider { bank }
    }

    pub fn ids_key(ids: &[u32]) -> String {
        let joined: Vec<String> = ids.iter().map(u32::to_string).collect();
        format!("ids:{}", joined.join(","))
    }

    fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        let idx = self
            .bank
            .index_of(key)
            .ok_or_else(|| Error::contract(format!("no embedding stored for {key:?}")))?;
        Ok(self.bank.raw_row(idx).iter().map(|&v| v as f64).collect())
    }
}

impl EmbeddingProvider for BankProvider {
    fn dim(&self) -> usize {
        self.bank.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.lookup(text)
    }

    fn embed_ids(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.lookup(&Self::ids_key(ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn stub_is_unit_and_deterministic() {
        let p = StubProvider::new(16, 7).unwrap();
        let a = p.embed_text("a red bus").unwrap();
        let b = p.embed_text("a red bus").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, p.embed_text("a red car").unwrap());
        assert_ne!(
            a,
            StubProvider::new(16, 8)
                .unwrap()
                .embed_text("a red bus")
                .unwrap()
        );
    }

    #[test]
    fn ids_hash_little_endian_bytes() {
        let p = StubProvider::new(4, 0).unwrap();
        let via_ids = p.embed_ids(&[1, 256]).unwrap();
        let bytes = [1u8, 0, 0, 0, 0, 1, 0, 0];
        assert_eq!(via_ids, p.vector_for(fnv1a64(&bytes)));
    }

    #[test]
    fn bank_provider_lookup() {
        let bank = FeatureBank::build(
            vec![
                ("hello".to_string(), vec![1.0, 2.0]),
                (BankProvider::ids_key(&[4, 5]), vec![0.5, 0.0]),
            ],
            2,
        )
        .unwrap();
        let p = BankProvider::new(bank);
        assert_eq!(p.embed_text("hello").unwrap(), vec![1.0, 2.0]);
        assert_eq!(p.embed_ids(&[4, 5]).unwrap(), vec![0.5, 0.0]);
        assert!(p.embed_text("missing").is_err());
    }
}
