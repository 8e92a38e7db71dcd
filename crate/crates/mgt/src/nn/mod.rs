//! Dense tensor arithmetic with reverse-mode gradients and the neural
//! building blocks assembled from it.

mod layers;
mod params;
mod tensor;

pub use layers::{
    dropout, gated_mpnn_layer, multi_head_attention, self_attention, Activation, BatchNorm,
    Dropout, EdgeIndex, FeedForward, GatedGcn, Linear, Mode, MultiHeadAttention,
};
pub use params::{load_checkpoint, save_checkpoint, ParamStore};
pub use tensor::{DTensor, NnError};
