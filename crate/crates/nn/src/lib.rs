//! Float64 tensors, tape-based reverse-mode autodiff, masked multi-head
//! attention, Adam and low-rank adapters.
//!
//! Everything here is single-threaded and deterministic: the same inputs and
//! seeds give bit-identical parameter trajectories.

pub mod attention;
pub mod checkpoint;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod lora;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::{masked_attention, AttentionMask};
pub use error::{NnError, Result};
pub use graph::{Grads, Graph, Var};
pub use layers::{LayerNorm, Linear, LoraParams, Mlp};
pub use lora::{lora_forward, LoraAdapter, LoraConfig};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
