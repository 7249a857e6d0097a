//! Checkpoint surgery for transformer MLPs.
//!
//! A dense gated MLP `W_down · (φ(W_gate·x) ⊙ W_up·x)` is split along its
//! intermediate axis into `B` contiguous branches whose gated sum reproduces
//! the original function. The branch form then supports differential
//! magnitude sparsity ([`sparsity::fractal_fade`]) and variance-compensated
//! branch pruning ([`sparsity::compensated_prune`]). A small decoder
//! ([`engine`]) runs converted checkpoints end to end, and [`report`] does the
//! parameter accounting.

pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod error;
pub mod report;
pub mod sparsity;
pub mod tensor;
pub mod transform;

pub use checkpoint::{load_checkpoint, resolve_mlp, save_checkpoint, Checkpoint, LayerMlp, NamingScheme};
pub use error::{Error, Result};
pub use tensor::{Activation, DType, Tensor};
pub use transform::{convert, convert_checkpoint, dense_forward, moe_forward, Branch, DenseMlp, MoeMlp};
