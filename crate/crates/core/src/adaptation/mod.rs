//! Masked-LM training of inserted adapters against a frozen encoder.

mod masking;
mod run;

pub use masking::{
    mask_batch, mask_sequence, maskable_positions, MaskAction, MaskedSequence, MaskingPolicy,
};
pub use run::{
    adaptation_step, encode_for_model, evaluate_batch, read_corpus, run_adaptation, write_metrics,
    AdaptationReport, AdaptationRun, ChunkSource, FeatureSource, MetricRecord, PlanOptimizer,
    RetrievalSource,
};

#[cfg(test)]
mod tests;
