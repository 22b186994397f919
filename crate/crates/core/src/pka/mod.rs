//! Pseudo-historical memories for users seen for the first time.
//!
//! A new user borrows the memories of the existing users whose current
//! interest context is closest, mixed with softmax weights.

use serde::{Deserialize, Serialize};

use crate::cie::cosine_distance;
use crate::csa::{MemoryPair, UserMemoryStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub user: usize,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub temperature: f64,
    /// Fewer existing users than requested.
    pub clamped: bool,
}

/// The `k` existing users nearest to `context` in cosine distance (ties by
/// ascending id), weighted by `softmax(c · c' / τ)` over the chosen set.
pub fn find_neighbors(
    user: usize,
    context: &[f64],
    existing: &[(usize, &[f64])],
    k: usize,
    temperature: f64,
) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::Config("neighbor count must be at least 1".into()));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let mut ranked: Vec<(f64, usize, &[f64])> = existing
        .iter()
        .map(|&(u, c)| (cosine_distance(context, c), u, c))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let clamped = ranked.len() < k;
    ranked.truncate(k);
    let logits: Vec<f64> = ranked
        .iter()
        .map(|(_, _, c)| context.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>() / temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(NeighborSet {
        user,
        neighbors: ranked.iter().map(|r| r.1).collect(),
        weights: exps.iter().map(|e| e / total).collect(),
        temperature,
        clamped,
    })
}

/// Writes the weighted combination of the neighbors' genuine memories as
/// the new user's pseudo-historical memories.
pub fn assign_pseudo_history(store: &mut UserMemoryStore, set: &NeighborSet) -> Result<()> {
    if set.neighbors.is_empty() {
        return Err(Error::Consistency(format!("user {} has no neighbors", set.user)));
    }
    let n = store.layers * store.heads;
    let mut pairs = vec![MemoryPair::zeros(store.dh, store.dh); n];
    for (&nb, &w) in set.neighbors.iter().zip(&set.weights) {
        let m = store
            .get(nb)
            .filter(|m| !m.pseudo)
            .ok_or_else(|| {
                Error::Consistency(format!("neighbor {nb} of user {} has no genuine memories", set.user))
            })?;
        for (acc, p) in pairs.iter_mut().zip(&m.pairs) {
            acc.scaled_add(w, p)?;
        }
    }
    store.set_pseudo(set.user, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csa::acquire_current;

    #[test]
    fn single_neighbor_has_unit_weight() {
        let c1 = [1.0, 0.0];
        let c2 = [0.0, 1.0];
        let set = find_neighbors(9, &[0.9, 0.1], &[(1, &c1), (2, &c2)], 1, 1.0).unwrap();
        assert_eq!(set.neighbors, vec![1]);
        assert_eq!(set.weights, vec![1.0]);
    }

    #[test]
    fn large_temperature_gives_uniform_weights() {
        let cs = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        let existing: Vec<(usize, &[f64])> = cs.iter().enumerate().map(|(i, c)| (i, &c[..])).collect();
        let set = find_neighbors(7, &[1.0, 0.2], &existing, 3, 1e6).unwrap();
        for w in &set.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_users_are_clamped() {
        let c = [1.0];
        let set = find_neighbors(5, &[1.0], &[(0, &c)], 3, 1.0).unwrap();
        assert!(set.clamped);
        assert_eq!(set.neighbors.len(), 1);
    }

    #[test]
    fn pseudo_memory_of_single_neighbor_is_a_copy() {
        let mut store = UserMemoryStore::new(1, 1, 2);
        let m = vec![acquire_current(&[0.1, 0.4], &[1.0, -1.0], 2, 2, 1)];
        store.update_historical(0, 1, &m).unwrap();
        store.commit_block(1).unwrap();
        let set = NeighborSet {
            user: 8,
            neighbors: vec![0],
            weights: vec![1.0],
            temperature: 1.0,
            clamped: false,
        };
        assign_pseudo_history(&mut store, &set).unwrap();
        assert_eq!(store.get(8).unwrap().pairs, m);
        assert!(store.get(8).unwrap().pseudo);
        let missing = NeighborSet {
            neighbors: vec![3],
            ..set
        };
        assert!(matches!(assign_pseudo_history(&mut store, &missing), Err(Error::Consistency(_))));
    }
}
