use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastream::DataBlock;
use crate::error::{Error, Result};

/// Recall@k and NDCG@k from 1-based target ranks, one per user.
pub fn recall_ndcg(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("no users to evaluate".into()));
    }
    let mut hits = 0usize;
    let mut gain = 0.0;
    for &r in ranks {
        if r >= 1 && r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hits as f64 / n, gain / n))
}

/// 1-based rank of each target in its ranked list; `usize::MAX` when absent.
pub fn ranks_from_lists(lists: &[Vec<usize>], targets: &[usize]) -> Result<Vec<usize>> {
    if lists.len() != targets.len() {
        return Err(Error::dim("ranks_from_lists", "one target per list"));
    }
    Ok(lists
        .iter()
        .zip(targets)
        .map(|(l, t)| l.iter().position(|x| x == t).map_or(usize::MAX, |p| p + 1))
        .collect())
}

/// Harmonic mean of retention and learning accuracy. Without retention
/// (first block) the learning accuracy is returned.
pub fn hmean(ra: Option<f64>, la: f64) -> f64 {
    match ra {
        None => la,
        Some(ra) if ra + la > 0.0 => 2.0 * ra * la / (ra + la),
        Some(_) => 0.0,
    }
}

/// RA (mean over earlier blocks), LA (latest block) and H-mean from
/// per-block recalls ordered by block; the last entry is the current block.
pub fn ra_la_hmean(recalls: &[f64]) -> Result<(Option<f64>, f64, f64)> {
    let (&la, past) = recalls
        .split_last()
        .ok_or_else(|| Error::UndefinedMetric("no blocks evaluated".into()))?;
    let ra = (!past.is_empty()).then(|| past.iter().sum::<f64>() / past.len() as f64);
    Ok((ra, la, hmean(ra, la)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserGroup {
    /// First appears in the last block.
    New,
    /// Present in every block.
    Active,
    /// Present in the first and last block only.
    Dormant,
    Other,
}

impl UserGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            UserGroup::New => "new",
            UserGroup::Active => "active",
            UserGroup::Dormant => "dormant",
            UserGroup::Other => "other",
        }
    }
}

/// Group of `user` over `blocks`; earlier variants win when several apply.
pub fn user_group(blocks: &[DataBlock], user: usize) -> UserGroup {
    let present: Vec<bool> = blocks.iter().map(|b| b.users.contains(&user)).collect();
    let Some((&last, rest)) = present.split_last() else {
        return UserGroup::Other;
    };
    if last && rest.iter().all(|p| !p) && !rest.is_empty() {
        return UserGroup::New;
    }
    if present.iter().all(|&p| p) {
        return UserGroup::Active;
    }
    if present.len() >= 2 && present[0] && last && present[1..present.len() - 1].iter().all(|p| !p) {
        return UserGroup::Dormant;
    }
    UserGroup::Other
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Evaluation of the model after training block `block`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub block: usize,
    /// Cutoff used for RA, LA, groups and new users.
    pub k: usize,
    pub n_users: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Recall@k on each block `1..=block` held-out targets, in order.
    pub block_recall: Vec<f64>,
    pub ra: Option<f64>,
    pub la: f64,
    pub hmean: f64,
    pub groups: BTreeMap<String, GroupMetrics>,
    /// Users first seen in this block.
    pub new_users: GroupMetrics,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::{split_blocks, BlockSpec, Interaction};

    #[test]
    fn hand_computed_recall_and_ndcg() {
        let (r, n) = recall_ndcg(&[1, 3, 20], 10).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(recall_ndcg(&[11], 10).unwrap(), (0.0, 0.0));
        assert_eq!(recall_ndcg(&[1], 10).unwrap(), (1.0, 1.0));
        assert!(matches!(recall_ndcg(&[], 10), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn harmonic_mean_cases() {
        assert!((hmean(Some(0.4), 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(hmean(Some(0.0), 0.7), 0.0);
        assert!((hmean(Some(0.2), 0.6) - 0.3).abs() < 1e-15);
        assert_eq!(hmean(None, 0.6), 0.6);
        let (ra, la, h) = ra_la_hmean(&[0.1, 0.3, 0.6]).unwrap();
        assert!((ra.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(la, 0.6);
        assert!((h - 0.3).abs() < 1e-12);
    }

    #[test]
    fn groups_follow_presence_pattern() {
        let ix = |user, t| Interaction { user, item: 0, timestamp: t };
        let xs = vec![
            ix(0, 0), ix(0, 1), ix(0, 2), ix(0, 3),
            ix(1, 3),
            ix(2, 0), ix(2, 3),
            ix(3, 0), ix(3, 1),
        ];
        let blocks = split_blocks(&xs, &BlockSpec::Count(4)).unwrap();
        assert_eq!(user_group(&blocks, 0), UserGroup::Active);
        assert_eq!(user_group(&blocks, 1), UserGroup::New);
        assert_eq!(user_group(&blocks, 2), UserGroup::Dormant);
        assert_eq!(user_group(&blocks, 3), UserGroup::Other);
    }
}
