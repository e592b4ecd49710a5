//! The cross-attention adapter block and insertion plans.
//!
//! An adapter projects the host hidden states down to width `r`, attends
//! from them to a matrix of external feature rows, refines the result with a
//! feed-forward layer, projects back up to `d` and adds it to the input
//! through a learnable scalar gate:
//!
//! ```text
//! u     = MHA(x·W1, V·W2, V·W2)          heads: Attn(q·Wq_i, k·Wk_i, v·Wv_i)
//! ũ     = LN(u + x·W1)
//! m     = LN(ũ + FFN(ũ))
//! x_out = LN(s · m·W3 + x)
//! ```

mod features;
mod layer;
mod plan;

pub use features::{stack_paired_features, FeatureMatrix, FeatureOrigin};
pub use layer::{count_adapter_params, AdapterConfig, ParamCount, XAdapterLayer};
pub use plan::{make_insertion_plan, ExpertKind, InsertionPlan, PlanBinding};
