//! Decoder assembly, parameter layout and accounting.

pub mod config;
pub mod forward;
pub mod params;

pub use config::{BlockKind, ModelConfig};
pub use forward::{
    attention_forward, block_forward, objective_grad_check, objective_with_tracking_targets,
    tracking_targets, training_objective, AdaptiveSettings, BlockOutputs, ForwardOptions,
    ForwardOutput,
};
pub use params::{
    parameter_count, BlockVars, BranchVars, LayerNormParams, Model, ModelVars, ParamCount,
    ParamKind, ParamMut, ParamRef, SecondBranch, TransformerBlock,
};
