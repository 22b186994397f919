//! Transformer sequence encoder, next-item loss, and ranking.

mod encoder;
mod model;
mod ranking;

pub use encoder::{
    bce_loss, bce_targets, embed, encode, segments_of, BceTargets, EncodeOptions, Encoded,
    HeadTrace, MemorySeed, MemorySeeds, BCE_EPS,
};
pub use model::{HeadKind, LayerParams, ModelConfig, ModelParameters, EMBEDDING_STD};
pub use ranking::{rank_items, target_rank, Ranking};
