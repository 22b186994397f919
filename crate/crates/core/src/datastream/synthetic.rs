use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{split_blocks, BlockSpec, DataBlock};
use super::ingest::Interaction;
use crate::error::{Error, Result};

/// Ticks reserved per block; sequences never reach this length.
const TICKS_PER_BLOCK: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Users present in the first block.
    pub n_users: usize,
    pub n_items: usize,
    pub blocks: usize,
    /// Probability that a returning user's interest cluster is redrawn.
    pub drift_rate: f64,
    /// Each block after the first adds `ceil(new_user_rate * n_users)` users.
    pub new_user_rate: f64,
    pub seed: u64,
    pub n_clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a previously seen user is active in a later block.
    pub return_rate: f64,
    /// Probability of an item drawn from the whole catalog instead of the
    /// user's cluster.
    pub noise: f64,
    /// User 0 is active in every block with this many times the usual
    /// sequence length.
    pub hyperactive_factor: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 500,
            blocks: 4,
            drift_rate: 0.3,
            new_user_rate: 0.1,
            seed: 0,
            n_clusters: 10,
            min_len: 6,
            max_len: 16,
            return_rate: 0.8,
            noise: 0.1,
            hyperactive_factor: 1,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 || self.blocks == 0 || self.n_clusters == 0 {
            return bad("synthetic counts must be positive");
        }
        if self.n_clusters > self.n_items {
            return bad("more clusters than items");
        }
        for (name, p) in [
            ("drift_rate", self.drift_rate),
            ("new_user_rate", self.new_user_rate),
            ("return_rate", self.return_rate),
            ("noise", self.noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.hyperactive_factor == 0 {
            return bad("hyperactive_factor must be at least 1");
        }
        Ok(())
    }
}

// Probabilities are turned into integer thresholds so that every structural
// decision consumes the generator through integer draws only.
fn chance(rng: &mut ChaCha8Rng, p: f64) -> bool {
    let threshold = (p * 1_000_000.0).round() as u32;
    rng.random_range(0..1_000_000u32) < threshold
}

fn cluster_range(cluster: usize, n_items: usize, n_clusters: usize) -> (usize, usize) {
    (cluster * n_items / n_clusters, (cluster + 1) * n_items / n_clusters)
}

/// Synthetic interactions with per-user interest clusters that drift
/// between blocks. Inside a cluster, users mostly walk forward a step or two
/// from their previous item, which gives the data learnable sequential
/// structure.
pub fn synthetic_interactions(cfg: &SyntheticConfig) -> Result<Vec<Interaction>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_block_new = (cfg.new_user_rate * cfg.n_users as f64).ceil() as usize;
    let mut clusters: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for b in 0..cfg.blocks {
        let mut active: Vec<usize> = Vec::new();
        for u in 0..clusters.len() {
            if u == 0 || chance(&mut rng, cfg.return_rate) {
                active.push(u);
                if chance(&mut rng, cfg.drift_rate) {
                    clusters[u] = rng.random_range(0..cfg.n_clusters);
                }
            }
        }
        let joining = if b == 0 { cfg.n_users } else { per_block_new };
        for _ in 0..joining {
            active.push(clusters.len());
            clusters.push(rng.random_range(0..cfg.n_clusters));
        }
        for &u in &active {
            let mut len = rng.random_range(cfg.min_len..=cfg.max_len);
            if u == 0 {
                len *= cfg.hyperactive_factor;
            }
            let (lo, hi) = cluster_range(clusters[u], cfg.n_items, cfg.n_clusters);
            let width = hi - lo;
            let mut pos = rng.random_range(0..width);
            for j in 0..len {
                let item = if chance(&mut rng, cfg.noise) {
                    rng.random_range(0..cfg.n_items)
                } else {
                    if j > 0 {
                        pos = if chance(&mut rng, 0.7) {
                            (pos + rng.random_range(1..=2)) % width
                        } else {
                            // Skewed towards the head of the cluster.
                            let a = rng.random_range(0..width);
                            let c = rng.random_range(0..width);
                            a.min(c)
                        };
                    }
                    lo + pos
                };
                out.push(Interaction {
                    user: u,
                    item,
                    timestamp: b as u64 * TICKS_PER_BLOCK + j as u64,
                });
            }
        }
    }
    out.sort_by_key(|x| (x.user, x.timestamp));
    Ok(out)
}

pub fn generate_synthetic_stream(cfg: &SyntheticConfig) -> Result<Vec<DataBlock>> {
    let xs = synthetic_interactions(cfg)?;
    let cuts = (1..cfg.blocks as u64).map(|b| b * TICKS_PER_BLOCK).collect();
    split_blocks(&xs, &BlockSpec::Boundaries(cuts))
}
