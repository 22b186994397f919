use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    /// Fewer candidates than requested.
    pub truncated: bool,
}

fn logits(h: &[f64], emb: &Tensor, candidates: &[usize]) -> Result<Vec<f64>> {
    if h.len() != emb.cols() {
        return Err(Error::dim("rank_items", format!("hidden {} vs embedding {}", h.len(), emb.cols())));
    }
    candidates
        .iter()
        .map(|&c| {
            if c >= emb.rows() {
                return Err(Error::Index { index: c, len: emb.rows() });
            }
            Ok(emb.row(c).iter().zip(h).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Top-`k` candidates by `σ(eᵀh)`, ties broken by ascending item id.
pub fn rank_items(h: &[f64], emb: &Tensor, candidates: &[usize], k: usize) -> Result<Ranking> {
    let scores = logits(h, emb, candidates)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    let truncated = k > candidates.len();
    order.truncate(k);
    Ok(Ranking {
        items: order.iter().map(|&i| candidates[i]).collect(),
        scores: order.iter().map(|&i| sigmoid(scores[i])).collect(),
        truncated,
    })
}

/// 1-based position `target` would take in the full ranking of
/// `candidates`, with the same tie-breaking as [`rank_items`].
pub fn target_rank(h: &[f64], emb: &Tensor, candidates: &[usize], target: usize) -> Result<usize> {
    if target >= emb.rows() {
        return Err(Error::Index { index: target, len: emb.rows() });
    }
    let ts: f64 = emb.row(target).iter().zip(h).map(|(a, b)| a * b).sum();
    let scores = logits(h, emb, candidates)?;
    let ahead = candidates
        .iter()
        .zip(&scores)
        .filter(|&(&c, &s)| c != target && (s > ts || (s == ts && c < target)))
        .count();
    Ok(ahead + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn higher_score_first_and_ties_by_id() {
        let emb = Tensor::from_rows(&[vec![2.0], vec![-2.0], vec![2.0]]).unwrap();
        let r = rank_items(&[1.0], &emb, &[1, 2, 0], 3).unwrap();
        assert_eq!(r.items, vec![0, 2, 1]);
        assert!(r.scores[0] > r.scores[2]);
        assert!(!r.truncated);
        assert_eq!(target_rank(&[1.0], &emb, &[0, 1, 2], 2).unwrap(), 2);
        assert_eq!(target_rank(&[1.0], &emb, &[0, 1, 2], 1).unwrap(), 3);
    }

    #[test]
    fn k_beyond_candidates_is_flagged() {
        let emb = Tensor::from_rows(&[vec![0.9], vec![0.1]]).unwrap();
        let r = rank_items(&[1.0], &emb, &[0, 1], 5).unwrap();
        assert_eq!(r.items, vec![0, 1]);
        assert!(r.truncated);
    }
}
