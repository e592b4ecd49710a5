//! Parameter arithmetic for a base model plus an adapter plan.

use serde::{Deserialize, Serialize};

use crate::encoder::{count_layer_weights, EncoderConfig};
use crate::error::{Error, Result};
use crate::xadapter::{count_adapter_params, AdapterConfig, ParamCount};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    /// Weight-matrix entries of one base layer.
    pub layer_weights: usize,
    /// Weight-matrix entries of one adapter.
    pub adapter_weights: usize,
    /// `adapter_weights / layer_weights`.
    pub ratio: f64,
    pub base: ParamCount,
    pub base_total: usize,
    /// Every parameter of one adapter, biases and norms included.
    pub adapter_total: usize,
    pub adapters: usize,
    /// Added parameters as a percentage of the base total.
    pub overhead_pct: f64,
}

pub fn params_report(
    encoder: &EncoderConfig,
    adapter: &AdapterConfig,
    adapters: usize,
) -> Result<ParamsReport> {
    encoder.validate()?;
    adapter.validate()?;
    if adapter.d_model != encoder.d_model {
        return Err(Error::Config(format!(
            "adapter d_model {} does not match the encoder's {}",
            adapter.d_model, encoder.d_model
        )));
    }
    let layer_weights = count_layer_weights(encoder);
    let adapter_weights = count_adapter_params(adapter);
    let base = encoder.count();
    let base_total = base.total();
    let adapter_total = ParamCount::from_shapes(&adapter.param_shapes()).total();
    Ok(ParamsReport {
        layer_weights,
        adapter_weights,
        ratio: adapter_weights as f64 / layer_weights as f64,
        base,
        base_total,
        adapter_total,
        adapters,
        overhead_pct: 100.0 * (adapters * adapter_total) as f64 / base_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_numbers() {
        let r = params_report(&EncoderConfig::reference(), &AdapterConfig::reference(), 1).unwrap();
        assert_eq!(r.layer_weights, 7_077_888);
        assert_eq!(r.adapter_weights, 4_194_304);
        assert!((r.ratio - 0.5926).abs() < 1e-4);
        // 30522·768 + 512·768 + 2·768 + 2·768 embeddings, 12 layers of
        // 7,087,872, a 30522 head bias
        assert_eq!(r.base_total, 108_922_170);
        assert!((r.overhead_pct - 3.7).abs() < 0.5, "{}", r.overhead_pct);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let e = EncoderConfig::desk(64);
        let a = AdapterConfig::desk(32);
        assert!(matches!(params_report(&e, &a, 1), Err(Error::Config(_))));
    }
}
