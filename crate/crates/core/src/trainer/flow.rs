use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::audit::AccessAudit;
use super::data::BlockData;
use super::state::StreamState;
use crate::backbone::{
    bce_loss, bce_targets, encode, target_rank, BceTargets, EncodeOptions, Encoded, MemorySeeds,
};
use crate::cie::{current_contexts, enrich_seeds, historical_contexts, match_key, matching_loss, MatchTerm};
use crate::csa::{accumulate_mapped, historical_seeds, MemoryPair};
use crate::datastream::{sample_negatives, DataBlock};
use crate::error::{Error, Result};
use crate::evalkit::{
    ra_la_hmean, recall_ndcg, user_group, GroupMetrics, MetricsReport,
};
use crate::numerics::{Bound, Tape, Tensor};
use crate::pka::{assign_pseudo_history, find_neighbors, NeighborSet};

const EVAL_CHUNK: usize = 64;

/// Historical memories plus the selected pool deltas for `users`, or `None`
/// when the model has no memories.
pub fn memory_seeds<'t>(
    state: &StreamState,
    tape: &'t Tape,
    bound: &Bound<'t>,
    users: &[usize],
    indices: &[(usize, usize)],
) -> Result<Option<MemorySeeds<'t>>> {
    let cfg = &state.config;
    if !cfg.memories_enabled() {
        return Ok(None);
    }
    let mut seeds = historical_seeds(tape, &state.memories, users);
    if cfg.cie_h() {
        let idx: Vec<usize> = indices.iter().map(|p| p.0).collect();
        enrich_seeds(&mut seeds, &state.model, bound, &state.pools.historical, &idx)?;
    }
    if cfg.cie_c() {
        let idx: Vec<usize> = indices.iter().map(|p| p.1).collect();
        enrich_seeds(&mut seeds, &state.model, bound, &state.pools.current, &idx)?;
    }
    Ok(Some(seeds))
}

/// Contexts of the latest refresh, kept for the matching loss.
#[derive(Clone, Debug, Default)]
pub struct RefreshCache {
    pub historical: BTreeMap<usize, Vec<f64>>,
    pub current: BTreeMap<usize, Vec<f64>>,
    pub neighbors: Vec<NeighborSet>,
    pub refreshes: usize,
}

/// Pseudo-historical memories for new users, then pool matches for every
/// user of the block.
pub fn refresh(state: &mut StreamState, data: &BlockData<'_>, cache: &mut RefreshCache) -> Result<()> {
    let cfg = state.config.clone();
    let (cie_h, cie_c, pka) = (cfg.cie_h(), cfg.cie_c(), cfg.pka());
    if !(cie_h || cie_c || pka) {
        return Ok(());
    }
    cache.refreshes += 1;
    let norm = cfg.normalization();
    let inputs: Vec<(usize, &[usize])> = data.inputs.iter().map(|(&u, s)| (u, s.as_slice())).collect();
    let cur = current_contexts(&state.model, &inputs, norm)?;

    if pka {
        cache.neighbors.clear();
        let existing: Vec<(usize, &[f64])> = inputs
            .iter()
            .zip(&cur)
            .filter(|((u, _), _)| state.memories.has_genuine(*u))
            .map(|((u, _), c)| (*u, c.as_slice()))
            .collect();
        if !existing.is_empty() {
            for ((u, _), c) in inputs.iter().zip(&cur) {
                if state.memories.has_genuine(*u) {
                    continue;
                }
                let set = find_neighbors(*u, c, &existing, cfg.top_k, cfg.temperature)?;
                assign_pseudo_history(&mut state.memories, &set)?;
                cache.neighbors.push(set);
            }
        }
    }

    if cie_h || cie_c {
        let hist = historical_contexts(&state.model, &state.memories, &inputs, norm)?;
        let keys_h = state.pools.historical.key_matrix(&state.model.store);
        let keys_c = state.pools.current.key_matrix(&state.model.store);
        for (((u, _), h), c) in inputs.iter().zip(hist).zip(cur) {
            let i = if cie_h { match_key(&h, keys_h)? } else { 0 };
            let j = if cie_c { match_key(&c, keys_c)? } else { 0 };
            state.indices.insert(*u, (i, j));
            cache.historical.insert(*u, h);
            cache.current.insert(*u, c);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub bce: f64,
    pub match_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub block: usize,
    pub epoch: usize,
    pub bce: f64,
    pub match_loss: f64,
    pub total: f64,
    pub max_abs_attention: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
    pub refreshes: usize,
    pub neighbors: Vec<NeighborSet>,
}

/// What a batch saw, for independent re-computation of its losses. Values
/// are taken before the optimizer step.
#[derive(Clone, Debug)]
pub struct BatchSnapshot {
    pub block: usize,
    pub epoch: usize,
    pub users: Vec<usize>,
    pub targets: BceTargets,
    pub hidden: Tensor,
    pub embeddings: Tensor,
    /// (contexts, selected key rows) per pool term of the matching loss.
    pub match_terms: Vec<(Vec<Vec<f64>>, Tensor)>,
    pub lambda_match: f64,
    pub bce: f64,
    pub match_loss: f64,
    pub total: f64,
}

/// Optional instrumentation for [`fit_block`].
#[derive(Default)]
pub struct FitHooks<'a> {
    pub audit: Option<&'a mut AccessAudit>,
    pub inspect: Option<&'a mut dyn FnMut(&BatchSnapshot)>,
}

struct TrainSeq<'d> {
    user: usize,
    items: &'d [usize],
    data: usize,
}

fn diagnostics(state: &StreamState) -> String {
    let pnorm: f64 = state
        .model
        .store
        .iter()
        .map(|(_, p)| p.value.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let mut mnorm = 0.0f64;
    for u in state.memories.users() {
        for p in &state.memories.get(u).unwrap().pairs {
            mnorm = mnorm.max(p.s.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    format!("parameter norm {pnorm:.6e}, max memory norm {mnorm:.6e}")
}

fn max_abs_attention(enc: &Encoded<'_>) -> f64 {
    enc.heads
        .iter()
        .flatten()
        .map(|h| h.output.value().data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0, f64::max)
}

/// Trains on one block: `epochs` passes with periodic refresh, each batch
/// minimizing `L_BCE + λ·L_match`. Memories are left untouched; see
/// [`commit_block`].
pub fn fit_block(
    state: &mut StreamState,
    data: &BlockData<'_>,
    replay: &[BlockData<'_>],
    hooks: &mut FitHooks<'_>,
) -> Result<FitSummary> {
    let t = data.index();
    if t != state.block + 1 {
        return Err(Error::Usage(format!(
            "block {t} cannot follow block {}",
            state.block
        )));
    }
    let cfg = state.config.clone();
    let rows = data.block.max_item().map_or(0, |m| m + 1);
    state.model.grow_items(rows, &mut state.rng)?;
    let pool = &data.block.cumulative_items;
    if let Some(a) = hooks.audit.as_deref_mut() {
        a.record(t, t, data.inputs.len());
    }

    let mut seqs: Vec<TrainSeq<'_>> = data
        .training_users()
        .into_iter()
        .map(|u| TrainSeq {
            user: u,
            items: &data.inputs[&u],
            data: 0,
        })
        .collect();
    for (k, r) in replay.iter().enumerate() {
        seqs.extend(r.training_users().into_iter().map(|u| TrainSeq {
            user: u,
            items: &r.inputs[&u],
            data: k + 1,
        }));
    }
    if seqs.is_empty() {
        return Err(Error::EmptyInput(format!("block {t} has no trainable sequence")));
    }
    let sources: Vec<&BlockData<'_>> = std::iter::once(data).chain(replay).collect();

    let mut cache = RefreshCache::default();
    let mut summary = FitSummary::default();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if epoch % cfg.refresh_interval == 0 {
            refresh(state, data, &mut cache).map_err(|e| diverged(state, e, t, epoch))?;
        }
        order.shuffle(&mut state.rng);
        let (mut sum_bce, mut sum_match, mut sum_total, mut max_a) = (0.0, 0.0, 0.0, 0.0f64);
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSeq<'_>> = chunk.iter().map(|&i| &seqs[i]).collect();
            if let Some(a) = hooks.audit.as_deref_mut() {
                for s in &batch {
                    a.record(t, sources[s.data].index(), 1);
                }
            }
            let rec = train_batch(state, &batch, &sources, pool, &cache, epoch, hooks)
                .map_err(|e| diverged(state, e, t, epoch))?;
            sum_bce += rec.0.bce;
            sum_match += rec.0.match_loss;
            sum_total += rec.0.total;
            max_a = max_a.max(rec.1);
            n_batches += 1;
            summary.batches.push(rec.0);
        }
        let n = n_batches as f64;
        summary.epochs.push(EpochRecord {
            block: t,
            epoch,
            bce: sum_bce / n,
            match_loss: sum_match / n,
            total: sum_total / n,
            max_abs_attention: max_a,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    summary.refreshes = cache.refreshes;
    summary.neighbors = cache.neighbors;
    Ok(summary)
}

/// Numerical failures during fitting become `Diverged` with parameter norms.
fn diverged(state: &StreamState, e: Error, block: usize, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Degenerate(_) => Error::Diverged {
            block,
            epoch,
            detail: format!("{e}; {}", diagnostics(state)),
        },
        other => other,
    }
}

fn user_indices(state: &StreamState, users: &[usize]) -> Vec<(usize, usize)> {
    users
        .iter()
        .map(|u| state.indices.get(u).copied().unwrap_or((0, 0)))
        .collect()
}

fn train_batch(
    state: &mut StreamState,
    batch: &[&TrainSeq<'_>],
    sources: &[&BlockData<'_>],
    pool: &std::collections::BTreeSet<usize>,
    cache: &RefreshCache,
    epoch: usize,
    hooks: &mut FitHooks<'_>,
) -> Result<(BatchRecord, f64)> {
    let cfg = &state.config;
    let lambda = cfg.lambda_match;
    let users: Vec<usize> = batch.iter().map(|s| s.user).collect();
    let items: Vec<&[usize]> = batch.iter().map(|s| s.items).collect();
    let indices = user_indices(state, &users);

    let tape = Tape::new();
    let bound = state.model.store.bind(&tape);
    let seeds = memory_seeds(state, &tape, &bound, &users, &indices)?;
    let opts = EncodeOptions {
        norm: cfg.normalization(),
        dropout_rng: Some(&mut state.rng),
    };
    let enc = encode(&state.model, &bound, &items, seeds.as_ref(), opts)?;

    let mut negatives = Vec::with_capacity(batch.len());
    for s in batch {
        let seen = &sources[s.data].seen[&s.user];
        negatives.push(sample_negatives(
            seen,
            pool,
            cfg.n_neg,
            s.items.len() - 1,
            &mut state.rng,
        )?);
    }
    let targets = bce_targets(&items, &negatives)?;
    let emb = bound.get(state.model.item_emb);
    let bce = bce_loss(enc.hidden, emb, &targets)?;

    // Only current-block users carry contexts from the latest refresh.
    let mut match_ctx: Vec<(&crate::cie::InterestPool, Vec<Vec<f64>>, Vec<usize>)> = Vec::new();
    let matched: Vec<usize> = (0..batch.len())
        .filter(|&b| batch[b].data == 0 && cache.current.contains_key(&users[b]))
        .collect();
    if !matched.is_empty() {
        if cfg.cie_h() {
            match_ctx.push((
                &state.pools.historical,
                matched.iter().map(|&b| cache.historical[&users[b]].clone()).collect(),
                matched.iter().map(|&b| indices[b].0).collect(),
            ));
        }
        if cfg.cie_c() {
            match_ctx.push((
                &state.pools.current,
                matched.iter().map(|&b| cache.current[&users[b]].clone()).collect(),
                matched.iter().map(|&b| indices[b].1).collect(),
            ));
        }
    }
    let terms: Vec<MatchTerm<'_>> = match_ctx
        .iter()
        .map(|(pool, c, s)| MatchTerm {
            pool,
            contexts: c,
            selected: s,
        })
        .collect();
    let lmatch = matching_loss(&bound, &terms)?;
    let total = match lmatch {
        Some(m) if lambda > 0.0 => bce.add(m.mul_scalar(lambda)?)?,
        _ => bce,
    };
    let record = BatchRecord {
        epoch,
        bce: bce.item(),
        match_loss: lmatch.map_or(0.0, |m| m.item()),
        total: total.item(),
    };
    let max_a = max_abs_attention(&enc);

    if let Some(inspect) = hooks.inspect.as_deref_mut() {
        let store = &state.model.store;
        inspect(&BatchSnapshot {
            block: sources[0].index(),
            epoch,
            users: users.clone(),
            targets: targets.clone(),
            hidden: enc.hidden.to_tensor(),
            embeddings: store.value(state.model.item_emb).clone(),
            match_terms: match_ctx
                .iter()
                .map(|(pool, c, s)| {
                    let keys = pool.key_matrix(store);
                    let rows: Vec<Vec<f64>> = s.iter().map(|&i| keys.row(i).to_vec()).collect();
                    (c.clone(), Tensor::from_rows(&rows).expect("key rows"))
                })
                .collect(),
            lambda_match: lambda,
            bce: record.bce,
            match_loss: record.match_loss,
            total: record.total,
        });
    }

    let grads = tape.backward(total)?;
    drop(terms);
    drop(match_ctx);
    state.model.store.accumulate(&tape, &grads)?;
    state.adam.step(&mut state.model.store)?;
    Ok((record, max_a))
}

/// Within-block memories `(s̃_N, z̃_N)` of every (layer, head) for each input,
/// computed in evaluation mode with the current parameters.
pub fn block_memories(
    state: &StreamState,
    inputs: &[(usize, &[usize])],
) -> Result<Vec<Vec<MemoryPair>>> {
    let dh = state.config.model.head_dim();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let users: Vec<usize> = chunk.iter().map(|c| c.0).collect();
        let seqs: Vec<&[usize]> = chunk.iter().map(|c| c.1).collect();
        let tape = Tape::no_grad();
        let bound = state.model.store.bind(&tape);
        let indices = user_indices(state, &users);
        let seeds = memory_seeds(state, &tape, &bound, &users, &indices)?;
        let enc = encode(
            &state.model,
            &bound,
            &seqs,
            seeds.as_ref(),
            EncodeOptions::eval(state.config.normalization()),
        )?;
        for w in enc.segments.windows(2) {
            let mut pairs = Vec::new();
            for layer in &enc.heads {
                for head in layer {
                    let k = head.keys.value();
                    let v = head.values.value();
                    pairs.push(accumulate_mapped(
                        &k.data()[w[0] * dh..w[1] * dh],
                        &v.data()[w[0] * dh..w[1] * dh],
                        dh,
                        dh,
                    ));
                }
            }
            out.push(pairs);
        }
    }
    Ok(out)
}

/// Absorbs every block user's sequence into the memory store and closes the
/// block. Pseudo memories of new users are kept as their starting point.
pub fn commit_block(state: &mut StreamState, data: &BlockData<'_>) -> Result<()> {
    let t = data.index();
    if t != state.block + 1 {
        return Err(Error::Usage(format!("block {t} cannot follow block {}", state.block)));
    }
    if state.config.memories_enabled() {
        let inputs: Vec<(usize, &[usize])> = data.inputs.iter().map(|(&u, s)| (u, s.as_slice())).collect();
        let mems = block_memories(state, &inputs)?;
        for ((u, _), pairs) in inputs.iter().zip(mems) {
            state.memories.update_historical(*u, t, &pairs)?;
        }
    }
    state.memories.commit_block(t)?;
    state.block = t;
    Ok(())
}

/// Pool matches for users that have none yet, from contexts of the given inputs.
fn missing_indices(
    state: &StreamState,
    cases: &[(usize, &[usize], usize)],
) -> Result<BTreeMap<usize, (usize, usize)>> {
    let cfg = &state.config;
    let mut out = BTreeMap::new();
    if !(cfg.cie_h() || cfg.cie_c()) {
        return Ok(out);
    }
    let todo: Vec<(usize, &[usize])> = cases
        .iter()
        .filter(|c| !state.indices.contains_key(&c.0))
        .map(|c| (c.0, c.1))
        .collect();
    if todo.is_empty() {
        return Ok(out);
    }
    let norm = cfg.normalization();
    let cur = current_contexts(&state.model, &todo, norm)?;
    let hist = historical_contexts(&state.model, &state.memories, &todo, norm)?;
    let keys_h = state.pools.historical.key_matrix(&state.model.store);
    let keys_c = state.pools.current.key_matrix(&state.model.store);
    for (((u, _), h), c) in todo.iter().zip(hist).zip(cur) {
        let i = if cfg.cie_h() { match_key(&h, keys_h)? } else { 0 };
        let j = if cfg.cie_c() { match_key(&c, keys_c)? } else { 0 };
        out.insert(*u, (i, j));
    }
    Ok(out)
}

/// Rank of each held-out target among `candidates`, using the current
/// parameters, memories and pool matches.
pub fn rank_targets(
    state: &StreamState,
    cases: &[(usize, &[usize], usize)],
    candidates: &[usize],
) -> Result<Vec<usize>> {
    let extra = missing_indices(state, cases)?;
    let mut ranks = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(EVAL_CHUNK) {
        let users: Vec<usize> = chunk.iter().map(|c| c.0).collect();
        let seqs: Vec<&[usize]> = chunk.iter().map(|c| c.1).collect();
        let indices: Vec<(usize, usize)> = users
            .iter()
            .map(|u| {
                state
                    .indices
                    .get(u)
                    .or_else(|| extra.get(u))
                    .copied()
                    .unwrap_or((0, 0))
            })
            .collect();
        let tape = Tape::no_grad();
        let bound = state.model.store.bind(&tape);
        let seeds = memory_seeds(state, &tape, &bound, &users, &indices)?;
        let enc = encode(
            &state.model,
            &bound,
            &seqs,
            seeds.as_ref(),
            EncodeOptions::eval(state.config.normalization()),
        )?;
        let h = enc.hidden.value();
        let emb = state.model.embeddings();
        for (row, c) in enc.last_rows().into_iter().zip(chunk) {
            ranks.push(target_rank(h.row(row), emb, candidates, c.2)?);
        }
    }
    Ok(ranks)
}

fn group_metrics(ranks: &[usize], k: usize) -> Result<GroupMetrics> {
    if ranks.is_empty() {
        return Ok(GroupMetrics::default());
    }
    let (recall, ndcg) = recall_ndcg(ranks, k)?;
    Ok(GroupMetrics {
        n_users: ranks.len(),
        recall,
        ndcg,
    })
}

/// Metrics of the current model on the held-out targets of every block up
/// to the latest one in `datas`. `blocks` are the raw blocks `1..=t`.
pub fn evaluate(state: &StreamState, blocks: &[DataBlock], datas: &[BlockData<'_>]) -> Result<MetricsReport> {
    let cfg = &state.config;
    let current = datas
        .last()
        .ok_or_else(|| Error::UndefinedMetric("nothing to evaluate".into()))?;
    let t = current.index();
    let candidates: Vec<usize> = current.block.cumulative_items.iter().copied().collect();
    let k = cfg.primary_k;

    let mut block_recall = Vec::with_capacity(datas.len());
    for d in datas {
        let cases = d.eval_cases();
        let ranks = rank_targets(state, &cases, &candidates)?;
        block_recall.push(recall_ndcg(&ranks, k)?.0);
    }
    let (ra, la, h) = ra_la_hmean(&block_recall)?;

    let cases = current.eval_cases();
    let ranks = rank_targets(state, &cases, &candidates)?;
    let mut report = MetricsReport {
        block: t,
        k,
        n_users: ranks.len(),
        block_recall,
        ra,
        la,
        hmean: h,
        ..MetricsReport::default()
    };
    for &kk in &cfg.eval_ks {
        let (r, n) = recall_ndcg(&ranks, kk)?;
        report.recall.insert(kk, r);
        report.ndcg.insert(kk, n);
    }
    let mut by_group: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    let mut new_ranks = Vec::new();
    for (c, &r) in cases.iter().zip(&ranks) {
        if blocks.len() >= 2 {
            by_group.entry(user_group(blocks, c.0).as_str()).or_default().push(r);
        }
        if current.block.new_users.contains(&c.0) {
            new_ranks.push(r);
        }
    }
    for (g, rs) in by_group {
        report.groups.insert(g.to_string(), group_metrics(&rs, k)?);
    }
    report.new_users = group_metrics(&new_ranks, k)?;
    Ok(report)
}

/// [`evaluate`] on blocks `1..=t`, preparing their splits.
pub fn evaluate_blocks(state: &StreamState, blocks: &[DataBlock]) -> Result<MetricsReport> {
    let max_len = state.config.model.max_seq_len;
    let datas: Vec<BlockData<'_>> = blocks.iter().map(|b| BlockData::new(b, max_len)).collect();
    evaluate(state, blocks, &datas)
}
