//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each, then a summary. With `ACCEPTANCE_STRICT=1` any failure makes the
//! process exit non-zero. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamrec::backbone::{bce_loss, bce_targets, encode, BceTargets, EncodeOptions};
use streamrec::cie::{matching_loss, MatchTerm};
use streamrec::csa::{
    acquire_current, attention_output_plain, csn_output, integrate, MemoryPair,
};
use streamrec::datastream::{
    generate_synthetic_stream, split_blocks, BlockSpec, DataBlock, Interaction, SyntheticConfig,
};
use streamrec::evalkit::{bench_attention, magnitude_probe, BenchConfig, Mechanism};
use streamrec::numerics::{
    check_param_gradients, linear_attention, Bound, Normalization, Tape, Tensor, Var,
};
use streamrec::trainer::{
    block_memories, commit_block, continue_stream, fit_block, memory_seeds, run_stream,
    AccessAudit, BatchSnapshot, BlockData, BlockReport, FitHooks, Regime, StreamHooks,
    StreamState, Toggles, TrainConfig,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Direct pairwise evaluation: every output is a similarity-weighted
/// average over the historical keys and the causal prefix.
fn quadratic_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    hk: &[f64],
    hv: &[f64],
    dh: usize,
    csn: bool,
) -> Vec<f64> {
    let n = q.len() / dh;
    let m = hk.len() / dh;
    let mut out = vec![0.0; n * dh];
    for i in 0..n {
        let fq: Vec<f64> = q[i * dh..(i + 1) * dh].iter().map(|&x| phi(x)).collect();
        let mut num = vec![0.0; dh];
        let mut zsum = vec![0.0; dh];
        let mut den = 0.0;
        let keys = (0..m)
            .map(|j| (&hk[j * dh..(j + 1) * dh], &hv[j * dh..(j + 1) * dh]))
            .chain((0..=i).map(|j| (&k[j * dh..(j + 1) * dh], &v[j * dh..(j + 1) * dh])));
        for (kj, vj) in keys {
            let fk: Vec<f64> = kj.iter().map(|&x| phi(x)).collect();
            let sim = dot(&fq, &fk);
            den += sim;
            for c in 0..dh {
                num[c] += sim * vj[c];
                zsum[c] += fk[c];
            }
        }
        let scale = if csn { norm(&fq) * norm(&zsum) } else { den };
        for c in 0..dh {
            out[i * dh + c] = num[c] / scale;
        }
    }
    out
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let dh = rng.random_range(1..=8);
        let m = rng.random_range(0..=6);
        let (q, k, v) = (randn(&mut rng, n * dh), randn(&mut rng, n * dh), randn(&mut rng, n * dh));
        let (hk, hv) = (randn(&mut rng, m * dh), randn(&mut rng, m * dh));
        let hist = acquire_current(&hk, &hv, dh, dh, m);
        for csn in [false, true] {
            let expected = quadratic_attention(&q, &k, &v, &hk, &hv, dh, csn);
            let norm_kind = if csn { Normalization::CauchySchwarz } else { Normalization::Plain };
            let tape = Tape::no_grad();
            let fq = tape.constant(Tensor::matrix(n, dh, q.clone()).unwrap()).phi().unwrap();
            let fk = tape.constant(Tensor::matrix(n, dh, k.clone()).unwrap()).phi().unwrap();
            let vv = tape.constant(Tensor::matrix(n, dh, v.clone()).unwrap());
            let s0 = tape.constant(Tensor::matrix(1, dh * dh, hist.s.clone()).unwrap());
            let z0 = tape.constant(Tensor::matrix(1, dh, hist.z.clone()).unwrap());
            let got = linear_attention(fq, fk, vv, Some(s0), Some(z0), &[0, n], norm_kind)
                .map_err(|e| format!("kernel failed: {e}"))?
                .to_tensor();
            for (a, b) in got.data().iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
            // Memory-module path: integrate the history with the prefix memory.
            for i in 0..n {
                let cur = acquire_current(&k, &v, dh, dh, i + 1);
                let mem = integrate(&hist, None, &cur, None).unwrap();
                let fqi: Vec<f64> = q[i * dh..(i + 1) * dh].iter().map(|&x| phi(x)).collect();
                let a = if csn { csn_output(&fqi, &mem) } else { attention_output_plain(&fqi, &mem) }
                    .map_err(|e| format!("memory read failed: {e}"))?;
                for (x, y) in a.iter().zip(&expected[i * dh..(i + 1) * dh]) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && secs < 5.0,
        format!("max abs diff {worst:.3e} over 100 cases (< 1e-6), {secs:.2}s (< 5s)"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_coord, mut worst_cos, mut norm_violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..100 {
        let dh = rng.random_range(1..=8);
        let n = rng.random_range(1..=12);
        let (k, v) = (randn(&mut rng, n * dh), randn(&mut rng, n * dh));
        let mem = acquire_current(&k, &v, dh, dh, n);
        let fq: Vec<f64> = randn(&mut rng, dh).into_iter().map(phi).collect();
        let plain = attention_output_plain(&fq, &mem).unwrap();
        let csn = csn_output(&fq, &mem).unwrap();
        let cos = dot(&fq, &mem.z) / (norm(&fq) * norm(&mem.z));
        for (c, p) in csn.iter().zip(&plain) {
            worst_coord = worst_coord.max((c - cos * p).abs());
        }
        if norm(&csn) > norm(&plain) {
            norm_violations += 1;
        }
        if norm(&plain) > 0.0 {
            let c = dot(&csn, &plain) / (norm(&csn) * norm(&plain));
            worst_cos = worst_cos.max((c - 1.0).abs());
        }
    }
    check(
        worst_coord <= 1e-10 && worst_cos <= 1e-10 && norm_violations == 0,
        format!(
            "coordinate diff {worst_coord:.3e}, |cosine - 1| {worst_cos:.3e} (<= 1e-10), {norm_violations} norm violations"
        ),
    )
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.d = 16;
    cfg.model.d_ff = 16;
    cfg.model.dropout = 0.0;
    cfg.pools.historical_len = 2;
    cfg.pools.current_len = 3;
    cfg
}

/// State with a committed historical memory for user 0 and pool matches.
fn gradient_state() -> StreamState {
    let cfg = small_config();
    let mut state = StreamState::new(&cfg, 12).unwrap();
    let dh = cfg.model.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<MemoryPair> = (0..cfg.model.layers * cfg.model.heads)
        .map(|_| {
            let k = randn(&mut rng, 3 * dh);
            let v = randn(&mut rng, 3 * dh);
            acquire_current(&k, &v, dh, dh, 3)
        })
        .collect();
    state.memories.update_historical(0, 1, &pairs).unwrap();
    state.memories.commit_block(1).unwrap();
    state.indices.insert(0, (1, 2));
    state
}

/// Next-item loss of user 0 through historical seeds, pool deltas when
/// enabled, and CSN.
fn seeded_bce<'t>(
    st: &StreamState,
    tape: &'t Tape,
    bound: &Bound<'t>,
    seq: &[usize],
    targets: &BceTargets,
) -> streamrec::Result<Var<'t>> {
    let seeds = memory_seeds(st, tape, bound, &[0], &[(1, 2)])?.expect("CSA model has memories");
    let enc = encode(&st.model, bound, &[seq], Some(&seeds), EncodeOptions::eval(Normalization::CauchySchwarz))?;
    bce_loss(enc.hidden, bound.get(st.model.item_emb), targets)
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let state = gradient_state();
    let seq: &[usize] = &[3, 7, 1, 9];
    let negatives = vec![vec![vec![4], vec![10], vec![2]]];
    let targets = bce_targets(&[seq], &negatives).unwrap();
    let h = 1e-5;
    let all_ids: Vec<_> = state.model.store.iter().map(|(id, _)| id).collect();

    let mut plain = state.clone();
    plain.config.toggles.cie_h = false;
    plain.config.toggles.cie_c = false;

    let mut store = state.model.store.clone();
    let err_stack = check_param_gradients(&mut store, &all_ids, 12, h, |tape, bound| seeded_bce(&plain, tape, bound, seq, &targets))
    .map_err(|e| format!("stack check failed: {e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ctx_h: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 16)).collect();
    let ctx_c: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 16)).collect();
    let (sel_h, sel_c) = ([0usize, 3, 3], [7usize, 1, 0]);
    let key_ids = [state.pools.historical.keys, state.pools.current.keys];
    let mut store = state.model.store.clone();
    let err_match = check_param_gradients(&mut store, &key_ids, 64, h, |_, bound| {
        let terms = [
            MatchTerm { pool: &state.pools.historical, contexts: &ctx_h, selected: &sel_h },
            MatchTerm { pool: &state.pools.current, contexts: &ctx_c, selected: &sel_c },
        ];
        Ok(matching_loss(bound, &terms)?.unwrap())
    })
    .map_err(|e| format!("matching check failed: {e}"))?;

    let layer = &state.model.layers[0];
    let delta_ids = [
        state.pools.historical.patterns,
        state.pools.current.patterns,
        layer.wk[0],
        layer.wv[1],
    ];
    let mut store = state.model.store.clone();
    let err_delta = check_param_gradients(&mut store, &delta_ids, 48, h, |tape, bound| seeded_bce(&state, tape, bound, seq, &targets))
    .map_err(|e| format!("enrichment check failed: {e}"))?;

    let secs = start.elapsed().as_secs_f64();
    let worst = err_stack.max(err_match).max(err_delta);
    check(
        worst < 1e-4 && secs < 60.0,
        format!(
            "rel. error: stack {err_stack:.2e}, matching {err_match:.2e}, enrichment {err_delta:.2e} (< 1e-4), {secs:.1}s (< 60s)"
        ),
    )
}

fn criterion_4() -> Verdict {
    let cfg = small_config();
    let items = [5usize, 2, 8];
    let mut xs: Vec<Interaction> = items
        .iter()
        .enumerate()
        .map(|(t, &item)| Interaction { user: 0, item, timestamp: 10 * t as u64 })
        .collect();
    // A second user keeps every block's item table populated.
    xs.extend((0..3).map(|t| Interaction { user: 1, item: 9, timestamp: 10 * t as u64 + 1 }));
    let blocks = split_blocks(&xs, &BlockSpec::Boundaries(vec![10, 20])).unwrap();
    let ingest_items = blocks.last().unwrap().max_item().unwrap() + 1;
    let fresh = StreamState::new(&cfg, ingest_items).unwrap();

    let mut streamed = fresh.clone();
    for b in &blocks {
        let data = BlockData::new(b, cfg.model.max_seq_len);
        commit_block(&mut streamed, &data).map_err(|e| e.to_string())?;
    }
    // Same remapped ids the blocks carry for user 0.
    let seq: Vec<usize> = blocks.iter().map(|b| b.sequences[&0].items[0]).collect();
    let batch = block_memories(&fresh, &[(0, seq.as_slice())]).map_err(|e| e.to_string())?;
    let stored = &streamed.memories.get(0).unwrap().pairs;
    let mut worst = 0.0f64;
    for (a, b) in stored.iter().zip(&batch[0]) {
        for (x, y) in a.s.iter().zip(&b.s).chain(a.z.iter().zip(&b.z)) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        worst <= 1e-12 && stored.len() == batch[0].len(),
        format!("max abs diff {worst:.3e} across {} (layer, head) memories (<= 1e-12)", stored.len()),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let cfg = BenchConfig {
        mechanisms: vec![Mechanism::SelfAttention, Mechanism::Csa],
        ..BenchConfig::default()
    };
    let (records, fits) = bench_attention(&cfg).map_err(|e| e.to_string())?;
    let slope = |m| fits.iter().find(|f| f.mechanism == m).unwrap().slope;
    let at = |m| records.iter().find(|r| r.mechanism == m && r.n == 8192).unwrap().infer_secs;
    let (csa, sa) = (slope(Mechanism::Csa), slope(Mechanism::SelfAttention));
    let (tc, ts) = (at(Mechanism::Csa), at(Mechanism::SelfAttention));
    let secs = start.elapsed().as_secs_f64();
    check(
        (0.8..=1.3).contains(&csa) && (1.7..=2.3).contains(&sa) && tc < ts && secs < 600.0,
        format!(
            "slopes: csa {csa:.3} (in [0.8, 1.3]), self_attention {sa:.3} (in [1.7, 2.3]); N=8192: csa {tc:.4}s vs {ts:.4}s; {secs:.0}s"
        ),
    )
}

fn criterion_6() -> Verdict {
    let blocks = generate_synthetic_stream(&SyntheticConfig {
        blocks: 6,
        hyperactive_factor: 10,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let mut state = StreamState::new(&cfg, blocks[0].max_item().unwrap() + 1).map_err(|e| e.to_string())?;
    let active: BTreeSet<usize> = [0].into();
    let mut lines = Vec::new();
    let mut max_ok = true;
    let mut last = (f64::NAN, f64::NAN);
    for b in &blocks {
        let data = BlockData::new(b, cfg.model.max_seq_len);
        fit_block(&mut state, &data, &[], &mut FitHooks::default()).map_err(|e| e.to_string())?;
        let p = magnitude_probe(&state, &data, &active).map_err(|e| e.to_string())?;
        max_ok &= p.csn.max <= p.plain.max;
        last = (
            p.csn.active_ratio.unwrap_or(f64::NAN),
            p.plain.active_ratio.unwrap_or(f64::NAN),
        );
        lines.push(format!(
            "t={} max {:.3}/{:.3} ratio {:.3}/{:.3}",
            b.index, p.csn.max, p.plain.max, last.0, last.1
        ));
        commit_block(&mut state, &data).map_err(|e| e.to_string())?;
    }
    check(
        max_ok && last.0 < last.1,
        format!("csn/plain per block: {}", lines.join("; ")),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn new_user_recall(reports: &[BlockReport]) -> f64 {
    let xs: Vec<f64> = reports
        .iter()
        .filter(|r| r.block >= 2 && r.metrics.new_users.n_users > 0)
        .map(|r| r.metrics.new_users.recall)
        .collect();
    mean(&xs)
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let mut variants: Vec<(String, Toggles, usize)> = vec![("full (K=5)".into(), Toggles::default(), 5)];
    for n in Toggles::NAMES {
        let mut t = Toggles::default();
        t.set(n, false).unwrap();
        variants.push((format!("-{n}"), t, 5));
    }
    variants.push(("K=1".into(), Toggles::default(), 1));
    let mut hmean = vec![Vec::new(); variants.len()];
    let mut new_rec = vec![Vec::new(); variants.len()];
    for seed in 0..3u64 {
        let blocks = generate_synthetic_stream(&SyntheticConfig { seed, ..SyntheticConfig::default() })
            .map_err(|e| e.to_string())?;
        for (i, (_, toggles, k)) in variants.iter().enumerate() {
            let cfg = TrainConfig { toggles: *toggles, top_k: *k, seed, ..TrainConfig::default() };
            let (_, reports) = run_stream(&cfg, &blocks, &mut StreamHooks::default()).map_err(|e| e.to_string())?;
            hmean[i].push(reports.last().unwrap().metrics.hmean);
            new_rec[i].push(new_user_recall(&reports));
        }
    }
    let h: Vec<f64> = hmean.iter().map(|x| mean(x)).collect();
    let r: Vec<f64> = new_rec.iter().map(|x| mean(x)).collect();
    // -pka is the K=0 run.
    let k0 = variants.iter().position(|v| v.0 == "-pka").unwrap();
    let k1 = variants.len() - 1;
    let a_ok = (1..=4).all(|i| h[0] >= h[i]);
    let b_ok = r[0] >= r[k0] && r[k1] >= r[k0];
    let hs: Vec<String> = variants
        .iter()
        .zip(&h)
        .zip(&hmean)
        .take(5)
        .map(|((v, x), per_seed)| {
            let seeds: Vec<String> = per_seed.iter().map(|p| format!("{p:.4}")).collect();
            format!("{} {x:.4} (seeds {})", v.0, seeds.join("/"))
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    check(
        a_ok && b_ok && secs < 2700.0,
        format!(
            "(a) mean H-mean: {} [{}]; (b) new-user Recall@10: K=5 {:.4}, K=1 {:.4}, K=0 {:.4} [{}]; {secs:.0}s (< 2700s)",
            hs.join(", "),
            if a_ok { "ok" } else { "violated" },
            r[0],
            r[k1],
            r[k0],
            if b_ok { "ok" } else { "violated" },
        ),
    )
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        refresh_interval: 2,
        ..TrainConfig::default()
    }
}

fn quick_stream() -> Vec<DataBlock> {
    generate_synthetic_stream(&SyntheticConfig {
        n_users: 60,
        n_items: 150,
        seed: 5,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn loss_trace(reports: &[BlockReport]) -> Vec<u64> {
    reports
        .iter()
        .flat_map(|r| r.epochs.iter().flat_map(|e| [e.bce.to_bits(), e.match_loss.to_bits(), e.total.to_bits()]))
        .collect()
}

fn criterion_8() -> Verdict {
    let blocks = quick_stream();
    let cfg = quick_config();
    let run = || run_stream(&cfg, &blocks, &mut StreamHooks::default()).map_err(|e| e.to_string());
    let (s1, r1) = run()?;
    let (s2, r2) = run()?;
    let identical = loss_trace(&r1) == loss_trace(&r2)
        && s1.to_bytes().unwrap() == s2.to_bytes().unwrap();

    let mut saved = None;
    let mut on_block = |st: &StreamState, r: &BlockReport| {
        if r.block == 2 {
            saved = Some(st.to_bytes()?);
        }
        Ok(())
    };
    let mut hooks = StreamHooks { on_block: Some(&mut on_block), ..StreamHooks::default() };
    run_stream(&cfg, &blocks, &mut hooks).map_err(|e| e.to_string())?;
    let mut resumed = StreamState::from_bytes(&saved.unwrap()).map_err(|e| e.to_string())?;
    let tail = continue_stream(&mut resumed, &blocks, &mut StreamHooks::default()).map_err(|e| e.to_string())?;
    let resume_ok = loss_trace(&tail) == loss_trace(&r1[2..])
        && tail.iter().zip(&r1[2..]).all(|(a, b)| a.metrics == b.metrics)
        && resumed.to_bytes().unwrap() == s1.to_bytes().unwrap();
    check(
        identical && resume_ok,
        format!(
            "repeat run bit-identical: {identical}; resume after block 2 equals uninterrupted run: {resume_ok} ({} epoch losses compared)",
            loss_trace(&r1).len()
        ),
    )
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Losses of one batch recomputed from its snapshot.
fn recompute(s: &BatchSnapshot) -> (f64, f64, f64) {
    let eps = 1e-7;
    let mut bce = 0.0;
    for ((&row, &item), &y) in s.targets.rows.iter().zip(&s.targets.items).zip(&s.targets.labels) {
        let p = sigmoid(dot(s.hidden.row(row), s.embeddings.row(item))).clamp(eps, 1.0 - eps);
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    bce /= s.targets.n_sequences as f64;
    let mut sum = 0.0;
    let mut batch = 0usize;
    for (contexts, keys) in &s.match_terms {
        batch = batch.max(contexts.len());
        for (b, c) in contexts.iter().enumerate() {
            let k = keys.row(b);
            sum += 1.0 - dot(c, k) / (norm(c) * norm(k));
        }
    }
    let lmatch = if batch == 0 { 0.0 } else { sum / batch as f64 };
    (bce, lmatch, bce + s.lambda_match * lmatch)
}

fn criterion_9() -> Verdict {
    let blocks = quick_stream();
    let cfg = TrainConfig { epochs: 3, ..quick_config() };
    let (mut worst, mut batches, mut with_match) = (0.0f64, 0usize, 0usize);
    let mut inspect = |s: &BatchSnapshot| {
        let (bce, lm, total) = recompute(s);
        worst = worst
            .max((bce - s.bce).abs())
            .max((lm - s.match_loss).abs())
            .max((total - s.total).abs());
        batches += 1;
        with_match += usize::from(!s.match_terms.is_empty());
    };
    let mut audit = AccessAudit::default();
    let mut hooks = StreamHooks {
        fit: FitHooks { audit: Some(&mut audit), inspect: Some(&mut inspect) },
        ..StreamHooks::default()
    };
    run_stream(&cfg, &blocks, &mut hooks).map_err(|e| e.to_string())?;
    let fine_tune_reads = audit.historical_reads();

    // The audit must see replayed sequences when they are read.
    let mut replay_audit = AccessAudit::default();
    let full = TrainConfig { epochs: 1, regime: Regime::FullBatch, ..quick_config() };
    let mut hooks = StreamHooks {
        fit: FitHooks { audit: Some(&mut replay_audit), inspect: None },
        ..StreamHooks::default()
    };
    run_stream(&full, &blocks, &mut hooks).map_err(|e| e.to_string())?;
    let replay_reads = replay_audit.historical_reads();
    check(
        worst <= 1e-12 && batches > 0 && with_match > 0 && fine_tune_reads == 0 && replay_reads > 0,
        format!(
            "max |recomputed - reported| {worst:.3e} over {batches} batches ({with_match} with matching loss); \
             reads of earlier blocks: fine-tune {fine_tune_reads}, full-batch control {replay_reads}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("oracle equivalence", criterion_1),
        ("CSN identity", criterion_2),
        ("gradient correctness", criterion_3),
        ("stream equals batch memory", criterion_4),
        ("complexity scaling", criterion_5),
        ("magnitude stabilization", criterion_6),
        ("continual-learning directional claims", criterion_7),
        ("determinism and resume", criterion_8),
        ("loss decomposition and stream discipline", criterion_9),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS criterion {n} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed.push(n.to_string());
                println!("FAIL criterion {n} ({name}) [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed.is_empty() {
        println!("all selected acceptance criteria passed");
        return;
    }
    println!("{} acceptance criteria failed: {}", failed.len(), failed.join(", "));
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

