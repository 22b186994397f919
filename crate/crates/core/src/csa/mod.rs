//! Linear attention with per-user memories that persist across blocks.

mod memory;
mod seeds;
mod store;

pub use memory::{
    accumulate_mapped, acquire_current, attention_output_plain, cos_query_normalizer,
    csn_output, integrate, MemoryPair,
};
pub use seeds::historical_seeds;
pub use store::{UserMemory, UserMemoryStore};
