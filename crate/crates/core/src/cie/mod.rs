//! Shared interest pools that enrich user memories.

mod contexts;
mod pool;

pub use contexts::{current_contexts, extract_contexts, historical_contexts, UserContexts};
pub use pool::{
    compute_deltas, cosine_distance, enrich_seeds, match_key, matching_distance_sum,
    InterestPool, InterestPools, PoolKind, POOL_INIT_STD,
};

use crate::error::Result;
use crate::numerics::{Bound, Var};

/// Selected keys of one pool together with the contexts that chose them.
pub struct MatchTerm<'a> {
    pub pool: &'a InterestPool,
    pub contexts: &'a [Vec<f64>],
    pub selected: &'a [usize],
}

/// Mean over the batch of the summed cosine distances between each
/// context and its selected key, over all given pools.
pub fn matching_loss<'t>(bound: &Bound<'t>, terms: &[MatchTerm<'_>]) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    let mut batch = 0;
    for t in terms {
        batch = batch.max(t.contexts.len());
        let part = matching_distance_sum(bound, t.pool, t.contexts, t.selected)?;
        total = Some(match total {
            Some(acc) => acc.add(part)?,
            None => part,
        });
    }
    total.map(|v| v.mul_scalar(1.0 / batch as f64)).transpose()
}
