//! Wall-clock comparison of the plain base forward against the adapter
//! path, feature lookup included.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::adaptation::{encode_for_model, FeatureSource};
use crate::encoder::{EncoderModel, Vocabulary};
use crate::error::{Error, Result};
use crate::xadapter::InsertionPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    /// `None` for an empty sample. p95 is nearest-rank.
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(LatencyStats {
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: s[rank - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub samples: usize,
    pub base: Option<LatencyStats>,
    pub adapter: Option<LatencyStats>,
    /// Mean adapter-path time over mean base time.
    pub ratio: Option<f64>,
    pub base_ms: Vec<f64>,
    pub adapter_ms: Vec<f64>,
}

pub const BENCH_REPORT_VERSION: u32 = 1;

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times `n` samples, cycling through `texts`. Each sample runs the base
/// path and then the adapter path on the same text.
pub fn run_bench(
    model: &EncoderModel,
    vocab: &Vocabulary,
    plan: &InsertionPlan,
    source: &dyn FeatureSource,
    texts: &[String],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<BenchReport> {
    if n > 0 && texts.is_empty() {
        return Err(Error::contract("bench needs at least one text"));
    }
    if plan.is_empty() && n > 0 {
        return Err(Error::contract("bench needs at least one adapter"));
    }
    let mut base_ms = Vec::with_capacity(n);
    let mut adapter_ms = Vec::with_capacity(n);
    for i in 0..n {
        let text = &texts[i % texts.len()];

        let t = Instant::now();
        let seq = encode_for_model(vocab, model, text);
        std::hint::black_box(model.logits(&seq, None, None)?);
        base_ms.push(ms_since(t));

        let t = Instant::now();
        let seq = encode_for_model(vocab, model, text);
        let features = source.features(text, rng)?;
        std::hint::black_box(model.logits(&seq, Some(plan), Some(&features))?);
        adapter_ms.push(ms_since(t));
    }
    let base = LatencyStats::of(&base_ms);
    let adapter = LatencyStats::of(&adapter_ms);
    let ratio = match (&base, &adapter) {
        (Some(b), Some(a)) if b.mean_ms > 0.0 => Some(a.mean_ms / b.mean_ms),
        _ => None,
    };
    Ok(BenchReport {
        version: BENCH_REPORT_VERSION,
        samples: n,
        base,
        adapter,
        ratio,
        base_ms,
        adapter_ms,
    })
}
