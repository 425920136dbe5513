//! The 2D attention U-Net.
//!
//! Each encoder level is two `conv3x3 -> batchnorm -> relu` units followed by
//! 2x2 max pooling. Each decoder level upsamples, gates the matching skip
//! connection with an attention gate, concatenates `[gated skip, upsampled]`
//! and applies another double conv unit. A 1x1 convolution and a sigmoid
//! produce the probability map.

mod checkpoint;
mod config;
mod gate;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorRecord, CHECKPOINT_FORMAT};
pub use config::{ModelConfig, UpsampleMode, DESK_CONFIG_JSON, MAX_DEPTH, PAPER_CONFIG_JSON};
pub use gate::{attention_gate, attention_gate_backward, AttentionGateParams, GateCache, GateGrads};
pub use network::{backward, forward, predict, BackwardOutput, ForwardCache, ForwardOutput, Gradients};
pub use params::{build_model, count_params, ModelParams, ParamCounts, ParamEntry, ParamKind};
