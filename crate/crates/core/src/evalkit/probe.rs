use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::{encode, EncodeOptions};
use crate::csa::{attention_output_plain, csn_output, MemoryPair};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::trainer::{memory_seeds, BlockData, StreamState};

const CHUNK: usize = 64;

/// Attention output norms of one user over every CSA head and position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMagnitude {
    pub user: usize,
    pub samples: usize,
    pub max_plain: f64,
    pub mean_plain: f64,
    pub max_csn: f64,
    pub mean_csn: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
    /// Mean of per-user mean norms of `active` users over that of the rest.
    pub active_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    pub block: usize,
    pub users: Vec<UserMagnitude>,
    pub plain: NormSummary,
    pub csn: NormSummary,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(mut all: Vec<f64>, users: &[UserMagnitude], active: &BTreeSet<usize>, mean: impl Fn(&UserMagnitude) -> f64) -> NormSummary {
    all.sort_by(f64::total_cmp);
    let avg = |it: Vec<f64>| (!it.is_empty()).then(|| it.iter().sum::<f64>() / it.len() as f64);
    let on = avg(users.iter().filter(|u| active.contains(&u.user)).map(&mean).collect());
    let off = avg(users.iter().filter(|u| !active.contains(&u.user)).map(&mean).collect());
    NormSummary {
        p50: percentile(&all, 50.0),
        p95: percentile(&all, 95.0),
        max: all.last().copied().unwrap_or(0.0),
        active_ratio: on.zip(off).filter(|(_, b)| *b > 0.0).map(|(a, b)| a / b),
    }
}

/// Runs every user of the block through the model in evaluation mode and,
/// at each CSA head and position, reads the same prefix memory both with
/// the plain and the Cauchy-Schwarz denominator.
pub fn magnitude_probe(
    state: &StreamState,
    data: &BlockData<'_>,
    active: &BTreeSet<usize>,
) -> Result<MagnitudeReport> {
    if !state.config.memories_enabled() {
        return Err(Error::Usage("magnitude probe needs CSA heads".into()));
    }
    let dh = state.config.model.head_dim();
    let inputs: Vec<(usize, &[usize])> = data.inputs.iter().map(|(&u, s)| (u, s.as_slice())).collect();
    let mut users = Vec::with_capacity(inputs.len());
    let (mut all_plain, mut all_csn) = (Vec::new(), Vec::new());
    for chunk in inputs.chunks(CHUNK) {
        let ids: Vec<usize> = chunk.iter().map(|c| c.0).collect();
        let seqs: Vec<&[usize]> = chunk.iter().map(|c| c.1).collect();
        let indices: Vec<(usize, usize)> = ids
            .iter()
            .map(|u| state.indices.get(u).copied().unwrap_or((0, 0)))
            .collect();
        let tape = Tape::no_grad();
        let bound = state.model.store.bind(&tape);
        let seeds = memory_seeds(state, &tape, &bound, &ids, &indices)?;
        let enc = encode(
            &state.model,
            &bound,
            &seqs,
            seeds.as_ref(),
            EncodeOptions::eval(state.config.normalization()),
        )?;
        for (b, w) in enc.segments.windows(2).enumerate() {
            let mut plain = Vec::new();
            let mut csn = Vec::new();
            for (l, layer) in enc.heads.iter().enumerate() {
                for (h, head) in layer.iter().enumerate() {
                    let (fq, fk, v) = (head.queries.value(), head.keys.value(), head.values.value());
                    let mut m = MemoryPair::zeros(dh, dh);
                    if let Some(seeds) = &seeds {
                        let seed = &seeds[l][h];
                        m.s.copy_from_slice(seed.s.value().row(b));
                        m.z.copy_from_slice(seed.z.value().row(b));
                    }
                    for i in w[0]..w[1] {
                        m.absorb(fk.row(i), v.row(i));
                        plain.push(norm(&attention_output_plain(fq.row(i), &m)?));
                        csn.push(norm(&csn_output(fq.row(i), &m)?));
                    }
                }
            }
            let n = plain.len() as f64;
            users.push(UserMagnitude {
                user: ids[b],
                samples: plain.len(),
                max_plain: plain.iter().copied().fold(0.0, f64::max),
                mean_plain: plain.iter().sum::<f64>() / n,
                max_csn: csn.iter().copied().fold(0.0, f64::max),
                mean_csn: csn.iter().sum::<f64>() / n,
            });
            all_plain.extend(plain);
            all_csn.extend(csn);
        }
    }
    Ok(MagnitudeReport {
        block: data.index(),
        plain: summarize(all_plain, &users, active, |u| u.mean_plain),
        csn: summarize(all_csn, &users, active, |u| u.mean_csn),
        users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&xs, 50.0), 2.0);
        assert_eq!(percentile(&xs, 95.0), 4.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
    }
}
