//! Jointly learnable quantization bitwidths and low-rank adapter ranks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`quantizer`]: residual multi-bitwidth quantizer with nested gates
//! - [`adapter`]: gated SVD-style low-rank blocks and the attention layer hosting them
//! - [`train`]: objective, optimizer, synthetic tasks, host models, training loop
//! - [`complexity`]: exact MAC, BOP and parameter counts
//! - [`config`] and [`report`]: run configuration and the JSON run report

use serde::{Deserialize, Serialize};

pub mod adapter;
pub mod complexity;
pub mod config;
pub mod error;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod train;

pub use adapter::{AttentionLayer, BLoraLinear, SiteBits};
pub use complexity::{AuditConfig, CountConfig, CountReport, ModelDims};
pub use config::{ModelConfig, RunConfig, TaskConfig, TaskKind, TrainConfig};
pub use error::{Error, Result, TensorError};
pub use quantizer::{CompatFlags, QuantizerConfig, QuantizerState, RangeMode};
pub use report::RunReport;
pub use tensor::{Tape, Tensor, Var};
pub use train::{Model, SyntheticTask};

/// Whether gates are sampled (training) or thresholded (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
