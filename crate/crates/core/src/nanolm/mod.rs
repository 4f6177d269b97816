//! A small decoder-only transformer with hand-written backward pass.
//!
//! Pre-norm residual blocks (RMS norm, causal multi-head attention, GELU
//! feed-forward), learned absolute positions and an output head tied to the
//! token embedding table. Any input position may carry an externally
//! supplied vector instead of a token id; gradients flow back to those
//! vectors so upstream projectors can be trained through a frozen model.
//!
//! Weight matrices multiply from the right (`y = x W`), so a projection
//! from `d_in` to `d_out` is stored as `d_in x d_out`. LoRA adapters follow
//! the same convention: `W_eff = W + (alpha / r) A B` with `A: d_in x r` and
//! `B: r x d_out`.

mod model;
mod ops;
mod params;

pub use model::{
    backward, final_hidden, forward, loss, next_token_logits, GradRequest, GradientBundle,
    HybridSequence, Position,
};
pub use ops::{gelu, gelu_grad};
pub use params::{
    init_backbone, init_lora, BackboneParams, LayerLora, LayerParams, LoraAdapter, LoraParams,
    ModelConfig,
};
