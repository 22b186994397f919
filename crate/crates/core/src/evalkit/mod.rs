//! Ranking metrics, stream-level accuracy, and diagnostics.

mod bench;
mod metrics;
mod probe;

pub use bench::{
    bench_attention, log_log_fit, BenchConfig, BenchRecord, Mechanism, ScalingFit,
};
pub use metrics::{
    hmean, ra_la_hmean, ranks_from_lists, recall_ndcg, user_group, GroupMetrics, MetricsReport,
    UserGroup,
};
pub use probe::{magnitude_probe, MagnitudeReport, NormSummary, UserMagnitude};
