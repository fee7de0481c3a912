//! Attention operators and Transformer stacks, including the decoder whose
//! cross-attention reads keys and values from different sources.

mod layers;
mod params;
mod transformer;

pub use layers::{attention, ca, mha, sa, AttentionOutput, FeedForward, LayerNormParams, Linear, MhaParams, Seq, LN_EPS};
pub use params::{Graph, ParamId, ParamStore};
pub use transformer::{
    ar_qkv_dec, ar_qkv_dec_seq, ar_trans_dec, ar_trans_dec_seq, causal_pattern, decode_layers, last_positions,
    qkv_dec, trans_dec, trans_enc, BlockLayer, BlockStack, CrossWidths, DecodeTrace,
};
