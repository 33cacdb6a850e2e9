//! Causal transformer sequence encoder.
//!
//! A window of `n` item ids is embedded as `item_embedding[id] + position_embedding[t]`
//! and passed through `L` pre-norm blocks:
//!
//! ```text
//! y = x + dropout(MHA(LN1(x)))
//! z = y + dropout(FFN(LN2(y)))
//! ```
//!
//! followed by a final layer norm (skipped when `L == 0`). Attention is
//! causal and never looks at padding positions. Items are scored by dot
//! product against the same table used for input embeddings.

mod backward;
mod forward;
mod params;

pub use forward::{
    embed_sequence, encode, feed_forward, multi_head_attention, score_items, AttentionMask, Dropout,
    HiddenStates,
};
pub use params::{LayerParams, ModelConfig, ModelParams};

pub(crate) use forward::{last_hidden, Trace};
