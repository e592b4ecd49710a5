use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::graph::{Gradients, Graph, Var};
use super::Tensor;

/// What a parameter is, for accounting. Only `Weight` entries count toward
/// the headline weight-matrix totals; the rest are reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Scale,
}

#[derive(Clone, Debug)]
struct Entry {
    tensor: Tensor,
    kind: ParamKind,
}

/// Named parameters with a trainable subset. Paths iterate in
/// lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
    trainable: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(
        &mut self,
        path: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
        trainable: bool,
    ) {
        let path = path.into();
        if trainable {
            self.trainable.insert(path.clone());
        } else {
            self.trainable.remove(&path);
        }
        self.entries.insert(path, Entry { tensor, kind });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path).map(|e| &mut e.tensor)
    }

    pub fn kind(&self, path: &str) -> Option<ParamKind> {
        self.entries.get(path).map(|e| e.kind)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.get(path)
            .ok_or_else(|| Error::contract(format!("missing parameter {path:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.contains(path)
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn set_trainable(&mut self, path: &str, on: bool) -> Result<()> {
        if !self.entries.contains_key(path) {
            return Err(Error::contract(format!("missing parameter {path:?}")));
        }
        if on {
            self.trainable.insert(path.to_string());
        } else {
            self.trainable.remove(path);
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn unfreeze_all(&mut self) {
        self.trainable = self.entries.keys().cloned().collect();
    }

    /// Total entries of the given kind.
    pub fn count_kind(&self, kind: ParamKind) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn count_all(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Registers every parameter as a leaf of `g`; trainable paths become
    /// gradient-tracking leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(path, e)| {
                let v = if self.trainable.contains(path) {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                };
                (path.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds gradients for every bound trainable path into the tensors'
    /// grad slots. A trainable leaf the loss never reached gets zeros.
    pub fn absorb_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (path, var) in &bound.vars {
            let trainable = self.trainable.contains(path);
            let Some(entry) = self.entries.get_mut(path) else {
                continue;
            };
            match grads.get(*var) {
                Some(g) => entry.tensor.accumulate_grad(g)?,
                None if trainable => {
                    let zeros = vec![0.0; entry.tensor.numel()];
                    entry.tensor.accumulate_grad(&zeros)?;
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries
            .values_mut()
            .for_each(|e| e.tensor.clear_grad());
    }

    /// SHA-256 over paths, shapes and little-endian values, in path order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (path, e) in &self.entries {
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn entries_with_kind(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.kind))
    }
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `path`.
    ///
    /// Model code only asks for paths it created itself, so a miss is a
    /// programming error rather than a recoverable condition.
    pub fn var(&self, path: &str) -> Var {
        match self.vars.get(path) {
            Some(v) => *v,
            None => panic!("parameter {path:?} was not bound"),
        }
    }

    pub fn get(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_iterate_lexicographically() {
        let mut p = ParameterSet::new();
        p.insert("b", Tensor::scalar(1.0), ParamKind::Scale, true);
        p.insert("a.z", Tensor::scalar(1.0), ParamKind::Scale, false);
        p.insert("a.b", Tensor::scalar(1.0), ParamKind::Scale, true);
        assert_eq!(p.paths().collect::<Vec<_>>(), ["a.b", "a.z", "b"]);
        assert_eq!(p.trainable_paths().collect::<Vec<_>>(), ["a.b", "b"]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]), ParamKind::Weight, true);
        let before = p.checksum();
        assert_eq!(before, p.clone().checksum());
        p.get_mut("w").unwrap().data_mut()[1] = 2.0000001;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn set_trainable_requires_existing_path() {
        let mut p = ParameterSet::new();
        assert!(p.set_trainable("nope", true).is_err());
    }
}
