//! Interaction logs, time-blocked streams, and per-block splits.

mod blocks;
mod ingest;
mod synthetic;

pub use blocks::{
    leave_one_out, manifest, read_blocks, sample_negatives, split_blocks, write_blocks,
    BlockSpec, BlockSplit, DataBlock, ManifestEntry, UserSequence,
};
pub use ingest::{ingest_csv, ingest_str, Ingested, Interaction};
pub use synthetic::{generate_synthetic_stream, synthetic_interactions, SyntheticConfig};
