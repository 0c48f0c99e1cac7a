//! Declarative model specs, network construction and cost accounting.
//!
//! A [`ModelSpec`] is a JSON document:
//!
//! ```json
//! {
//!   "name": "cnn4",
//!   "input": [1, 28, 28],
//!   "layers": [
//!     {"kind": "conv", "channels": 8, "kernel": 3, "padding": 1},
//!     {"kind": "bn"},
//!     {"kind": "relu"},
//!     {"kind": "pool", "pool": "max", "kernel": 2},
//!     {"kind": "basic_block", "channels": 16, "stride": 2},
//!     {"kind": "flatten"},
//!     {"kind": "dense", "channels": 10}
//!   ]
//! }
//! ```
//!
//! Unknown fields, and known fields that do not apply to a layer kind, are
//! rejected.

mod cost;
mod network;
mod spec;

pub use cost::{comparison_table, cost_report, count_flops, count_params, CostReport, LayerCost, Overhead};
pub use network::{
    build_model, fnv1a, param_rng, BlockLayer, BnLayer, ConvLayer, Layer, Network, IC_INNER_BIAS_INIT,
    W_PRIME_INIT,
};
pub use spec::{block_plan, paired_variants, BlockPlan, LayerKind, LayerSpec, ModelSpec, Variant};
