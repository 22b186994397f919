//! Block-by-block training, evaluation and memory commits.

mod audit;
mod config;
mod data;
mod flow;
mod state;
mod stream;

pub use audit::AccessAudit;
pub use config::{PoolConfig, Regime, Toggles, TrainConfig};
pub use data::BlockData;
pub use flow::{
    block_memories, commit_block, evaluate, evaluate_blocks, fit_block, memory_seeds, rank_targets, refresh,
    BatchRecord, BatchSnapshot, EpochRecord, FitHooks, FitSummary, RefreshCache,
};
pub use state::StreamState;
pub use stream::{
    ablation_run, continue_stream, parse_ablation, run_stream, BlockReport, StreamHooks, Variant,
    VariantResult,
};
