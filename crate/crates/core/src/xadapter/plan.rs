use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph};

use super::{AdapterConfig, XAdapterLayer};

/// Which external feature source an adapter family reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    /// Retrieved image embeddings.
    #[serde(rename = "v", alias = "visual")]
    Visual,
    /// Chunked text-encoder embeddings.
    #[serde(rename = "t", alias = "textual")]
    Textual,
}

impl ExpertKind {
    /// One adapter before the last layer for the visual expert, two before
    /// the last two layers for the textual one.
    pub fn default_positions(self, n_layers: usize) -> Vec<usize> {
        match self {
            ExpertKind::Visual => vec![n_layers],
            ExpertKind::Textual if n_layers >= 2 => vec![n_layers - 1, n_layers],
            ExpertKind::Textual => vec![n_layers],
        }
    }

    pub fn default_mask_ratio(self) -> f64 {
        match self {
            ExpertKind::Visual => 0.45,
            ExpertKind::Textual => 0.15,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            ExpertKind::Visual => 3,
            ExpertKind::Textual => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Visual => "v",
            ExpertKind::Textual => "t",
        }
    }
}

impl std::str::FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v" | "visual" | "v-expert" => Ok(ExpertKind::Visual),
            "t" | "textual" | "t-expert" => Ok(ExpertKind::Textual),
            other => Err(Error::Config(format!("unknown expert kind {other:?}"))),
        }
    }
}

/// Adapters keyed by the 1-based encoder layer they run in front of.
#[derive(Clone, Debug)]
pub struct InsertionPlan {
    kind: ExpertKind,
    adapters: BTreeMap<usize, XAdapterLayer>,
}

/// Graph handles for every adapter in a plan.
pub struct PlanBinding {
    bound: BTreeMap<usize, Bound>,
}

impl PlanBinding {
    pub fn get(&self, position: usize) -> Option<&Bound> {
        self.bound.get(&position)
    }
}

/// Builds a plan with a freshly initialized adapter at each position.
/// Positions are 1-based layer indices and must be distinct.
pub fn make_insertion_plan(
    positions: &[usize],
    kind: ExpertKind,
    n_layers: usize,
    config: &AdapterConfig,
    seed: u64,
) -> Result<InsertionPlan> {
    let mut adapters = BTreeMap::new();
    for &p in positions {
        if p == 0 || p > n_layers {
            return Err(Error::Config(format!(
                "insertion position {p} outside 1..={n_layers}"
            )));
        }
        if adapters.contains_key(&p) {
            return Err(Error::Config(format!("duplicate insertion position {p}")));
        }
        let layer_seed = seed ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        adapters.insert(p, XAdapterLayer::init(config.clone(), layer_seed)?);
    }
    Ok(InsertionPlan { kind, adapters })
}

impl InsertionPlan {
    pub fn empty(kind: ExpertKind) -> Self {
        InsertionPlan {
            kind,
            adapters: BTreeMap::new(),
        }
    }

    pub fn from_layers(kind: ExpertKind, layers: BTreeMap<usize, XAdapterLayer>) -> Self {
        InsertionPlan {
            kind,
            adapters: layers,
        }
    }

    pub fn kind(&self) -> ExpertKind {
        self.kind
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.adapters.keys().copied().collect()
    }

    pub fn adapter(&self, position: usize) -> Option<&XAdapterLayer> {
        self.adapters.get(&position)
    }

    pub fn adapter_mut(&mut self, position: usize) -> Option<&mut XAdapterLayer> {
        self.adapters.get_mut(&position)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &XAdapterLayer)> {
        self.adapters.iter().map(|(p, a)| (*p, a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut XAdapterLayer)> {
        self.adapters.iter_mut().map(|(p, a)| (*p, a))
    }

    /// Largest position in the plan, if any.
    pub fn max_position(&self) -> Option<usize> {
        self.adapters.keys().next_back().copied()
    }

    pub fn bind(&self, g: &mut Graph) -> PlanBinding {
        PlanBinding {
            bound: self
                .adapters
                .iter()
                .map(|(p, a)| (*p, a.params().bind(g)))
                .collect(),
        }
    }

    /// Per-adapter SHA-256 fingerprints joined in position order.
    pub fn checksum(&self) -> String {
        self.adapters
            .iter()
            .map(|(p, a)| format!("{p}:{}", a.params().checksum()))
            .collect::<Vec<_>>()
            .join(",")
    }
}
