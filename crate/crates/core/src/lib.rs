//! Numerical laboratory for gated attention variants: a small f64 tensor
//! engine with reverse-mode autodiff, vanilla/gated/sink attention blocks,
//! a decoder-only transformer, synthetic sequence tasks, extreme-token
//! diagnostics, deterministic training, and simulated INT8 quantization.

pub mod attention;
pub mod chart;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, AttentionParams, AttentionTrace, GateKind, SinkKind};
pub use error::{Error, Result};
pub use metrics::MetricsRecord;
pub use model::{count_params, ModelConfig, ParamSet};
pub use tensor::{Tape, Tensor, Var};
pub use train::TrainConfig;
