//! Patch embedding, encoder blocks, the full-model forward pass and model
//! persistence.

mod batch;
mod config;
pub mod container;
mod forward;
mod model;

pub use batch::ChannelBatch;
pub use config::{BlockKind, ModelConfig, Residual};
pub use forward::{
    add_embeddings, block_on_tape, dcvit_block, embed_on_tape, embeddings_on_tape, encode, encode_on_tape,
    forward_logits, logits_on_tape, mcvit_block, params_on_tape, patch_embed, patchify, pool_on_tape, ParamVars,
};
pub use model::{param_group, ClsParams, DcVitModel, LayerParams, Mlp, ModelParams};
