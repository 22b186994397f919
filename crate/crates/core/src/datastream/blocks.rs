use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ingest::Interaction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub block: usize,
}

/// All interactions of one time period, grouped per user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBlock {
    /// 1-based position in the stream.
    pub index: usize,
    pub sequences: BTreeMap<usize, UserSequence>,
    pub users: BTreeSet<usize>,
    pub items: BTreeSet<usize>,
    pub cumulative_items: BTreeSet<usize>,
    /// Users whose first interaction in the stream falls in this block.
    pub new_users: BTreeSet<usize>,
    pub n_interactions: usize,
}

impl DataBlock {
    /// Users with at least two interactions, i.e. at least one
    /// (input, target) pair.
    pub fn trainable_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.sequences
            .values()
            .filter(|s| s.items.len() >= 2)
            .map(|s| s.user)
    }

    pub fn max_item(&self) -> Option<usize> {
        self.cumulative_items.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    /// Equal-width time windows over the observed span.
    Count(usize),
    /// Strictly increasing cut points; `k` cuts give `k + 1` blocks.
    Boundaries(Vec<u64>),
}

pub fn split_blocks(interactions: &[Interaction], spec: &BlockSpec) -> Result<Vec<DataBlock>> {
    if interactions.is_empty() {
        return Err(Error::EmptyInput("no interactions to split".into()));
    }
    let min = interactions.iter().map(|x| x.timestamp).min().unwrap();
    let max = interactions.iter().map(|x| x.timestamp).max().unwrap();
    let n_blocks;
    let assign: Box<dyn Fn(u64) -> usize> = match spec {
        BlockSpec::Count(t) => {
            let t = *t;
            if t == 0 {
                return Err(Error::Config("number of blocks must be at least 1".into()));
            }
            let span = (max - min) as u128 + 1;
            if t as u128 > span {
                return Err(Error::Config(format!(
                    "{t} blocks requested but timestamps span only {span} ticks"
                )));
            }
            n_blocks = t;
            Box::new(move |ts| (((ts - min) as u128 * t as u128) / span) as usize)
        }
        BlockSpec::Boundaries(cuts) => {
            if cuts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("block boundaries must be strictly increasing".into()));
            }
            n_blocks = cuts.len() + 1;
            let cuts = cuts.clone();
            Box::new(move |ts| cuts.partition_point(|&c| c <= ts))
        }
    };

    let mut per_block: Vec<Vec<Interaction>> = vec![Vec::new(); n_blocks];
    for x in interactions {
        per_block[assign(x.timestamp)].push(*x);
    }

    let mut cumulative = BTreeSet::new();
    let mut seen_users = BTreeSet::new();
    let mut blocks = Vec::with_capacity(n_blocks);
    for (b, mut xs) in per_block.into_iter().enumerate() {
        xs.sort_by_key(|x| (x.user, x.timestamp));
        let index = b + 1;
        let mut sequences: BTreeMap<usize, UserSequence> = BTreeMap::new();
        for x in &xs {
            sequences
                .entry(x.user)
                .or_insert_with(|| UserSequence {
                    user: x.user,
                    items: Vec::new(),
                    block: index,
                })
                .items
                .push(x.item);
        }
        let users: BTreeSet<usize> = sequences.keys().copied().collect();
        let items: BTreeSet<usize> = xs.iter().map(|x| x.item).collect();
        cumulative.extend(items.iter().copied());
        let new_users = users.difference(&seen_users).copied().collect();
        seen_users.extend(users.iter().copied());
        blocks.push(DataBlock {
            index,
            sequences,
            users,
            items,
            cumulative_items: cumulative.clone(),
            new_users,
            n_interactions: xs.len(),
        });
    }
    Ok(blocks)
}

/// Leave-one-out split of a block: the last item of each sequence is held out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub train: BTreeMap<usize, Vec<usize>>,
    pub targets: BTreeMap<usize, usize>,
    /// Sequences too short to split.
    pub excluded: usize,
}

pub fn leave_one_out(block: &DataBlock) -> BlockSplit {
    let mut split = BlockSplit::default();
    for seq in block.sequences.values() {
        match seq.items.split_last() {
            Some((&last, rest)) if !rest.is_empty() => {
                split.train.insert(seq.user, rest.to_vec());
                split.targets.insert(seq.user, last);
            }
            _ => split.excluded += 1,
        }
    }
    split
}

/// For each of `positions` training positions, `n_neg` distinct items drawn
/// uniformly from `pool` minus `exclude`.
pub fn sample_negatives<R: Rng + ?Sized>(
    exclude: &BTreeSet<usize>,
    pool: &BTreeSet<usize>,
    n_neg: usize,
    positions: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let candidates: Vec<usize> = pool.difference(exclude).copied().collect();
    if n_neg > candidates.len() || (n_neg > 0 && candidates.is_empty()) {
        return Err(Error::Sampling(format!(
            "{n_neg} negatives requested from {} candidates",
            candidates.len()
        )));
    }
    Ok((0..positions)
        .map(|_| {
            sample(rng, candidates.len(), n_neg)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub t: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_cumulative_items: usize,
    pub n_interactions: usize,
    pub n_new_users: usize,
}

pub fn manifest(blocks: &[DataBlock]) -> Vec<ManifestEntry> {
    blocks
        .iter()
        .map(|b| ManifestEntry {
            t: b.index,
            n_users: b.users.len(),
            n_items: b.items.len(),
            n_cumulative_items: b.cumulative_items.len(),
            n_interactions: b.n_interactions,
            n_new_users: b.new_users.len(),
        })
        .collect()
}

fn block_file(dir: &Path, t: usize) -> std::path::PathBuf {
    dir.join(format!("block_{t:03}.json"))
}

/// Writes `manifest.json` and one `block_NNN.json` per block.
pub fn write_blocks(dir: &Path, blocks: &[DataBlock]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest(blocks))?,
    )?;
    for b in blocks {
        std::fs::write(block_file(dir, b.index), serde_json::to_string(b)?)?;
    }
    Ok(())
}

pub fn read_blocks(dir: &Path) -> Result<Vec<DataBlock>> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no blocks", dir.display())));
    }
    let mut blocks = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        if e.t != i + 1 {
            return Err(Error::Config(format!("manifest block {} out of order", e.t)));
        }
        let b: DataBlock = serde_json::from_str(&std::fs::read_to_string(block_file(dir, e.t))?)?;
        if b.index != e.t {
            return Err(Error::Config(format!("block file {} has index {}", e.t, b.index)));
        }
        blocks.push(b);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ix(user: usize, item: usize, timestamp: u64) -> Interaction {
        Interaction { user, item, timestamp }
    }

    #[test]
    fn uniform_ticks_split_into_equal_blocks() {
        let xs: Vec<_> = (0..100).map(|t| ix(0, t as usize, t)).collect();
        let blocks = split_blocks(&xs, &BlockSpec::Count(4)).unwrap();
        assert_eq!(blocks.len(), 4);
        for b in &blocks {
            assert_eq!(b.n_interactions, 25);
        }
        assert_eq!(blocks[1].items.first(), Some(&25));
    }

    #[test]
    fn dormant_user_shape() {
        let xs = vec![ix(0, 0, 0), ix(1, 1, 1), ix(1, 2, 2), ix(1, 3, 3), ix(0, 4, 3)];
        let blocks = split_blocks(&xs, &BlockSpec::Count(4)).unwrap();
        let present: Vec<bool> = blocks.iter().map(|b| b.users.contains(&0)).collect();
        assert_eq!(present, vec![true, false, false, true]);
        assert!(blocks[3].new_users.is_empty());
        assert!(blocks[1].new_users.contains(&1));
    }

    #[test]
    fn too_many_blocks_is_config_error() {
        let xs = vec![ix(0, 0, 0), ix(0, 1, 1)];
        assert!(matches!(split_blocks(&xs, &BlockSpec::Count(3)), Err(Error::Config(_))));
        assert!(matches!(
            split_blocks(&xs, &BlockSpec::Boundaries(vec![2, 2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn boundaries_assign_by_cut_points() {
        let xs = vec![ix(0, 0, 0), ix(0, 1, 5), ix(0, 2, 10)];
        let blocks = split_blocks(&xs, &BlockSpec::Boundaries(vec![5, 10])).unwrap();
        let counts: Vec<usize> = blocks.iter().map(|b| b.n_interactions).collect();
        assert_eq!(counts, vec![1, 1, 1]);
    }

    #[test]
    fn leave_one_out_excludes_singletons() {
        let xs = vec![
            ix(0, 0, 0),
            ix(0, 1, 1),
            ix(0, 2, 2),
            ix(1, 3, 0),
            ix(2, 4, 0),
            ix(2, 5, 1),
        ];
        let b = &split_blocks(&xs, &BlockSpec::Count(1)).unwrap()[0];
        let split = leave_one_out(b);
        assert_eq!(split.train[&0], vec![0, 1]);
        assert_eq!(split.targets[&0], 2);
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.excluded, 1);
    }

    #[test]
    fn negatives_avoid_user_items_and_are_seeded() {
        let pool: BTreeSet<usize> = [0, 1, 2].into();
        let mine: BTreeSet<usize> = [0].into();
        let a = sample_negatives(&mine, &pool, 2, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_negatives(&mine, &pool, 2, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        for row in &a {
            let mut r = row.clone();
            r.sort();
            assert_eq!(r, vec![1, 2]);
        }
        assert!(matches!(
            sample_negatives(&mine, &pool, 3, 1, &mut ChaCha8Rng::seed_from_u64(7)),
            Err(Error::Sampling(_))
        ));
    }
}
