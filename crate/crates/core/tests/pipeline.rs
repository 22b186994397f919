use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamrec::backbone::{encode, rank_items, target_rank, EncodeOptions, HeadKind, ModelConfig, ModelParameters};
use streamrec::datastream::{generate_synthetic_stream, DataBlock, SyntheticConfig};
use streamrec::numerics::{Normalization, Tape, Tensor};
use streamrec::trainer::{
    block_memories, commit_block, fit_block, run_stream, BlockData, FitHooks, Regime, StreamHooks,
    StreamState, TrainConfig,
};
use streamrec::Error;

fn tiny_model(kind: HeadKind) -> ModelParameters {
    let cfg = ModelConfig {
        d: 8,
        d_ff: 8,
        dropout: 0.0,
        head_kind: kind,
        ..ModelConfig::default()
    };
    ModelParameters::new(cfg, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn hidden(model: &ModelParameters, seqs: &[&[usize]], norm: Normalization) -> Tensor {
    let tape = Tape::no_grad();
    let bound = model.store.bind(&tape);
    encode(model, &bound, seqs, None, EncodeOptions::eval(norm)).unwrap().hidden.to_tensor()
}

#[test]
fn encoder_is_causal_for_both_head_kinds() {
    for kind in [HeadKind::Csa, HeadKind::SelfAttention] {
        let model = tiny_model(kind);
        let a = hidden(&model, &[&[1, 2, 3, 4]], Normalization::CauchySchwarz);
        let b = hidden(&model, &[&[1, 2, 3, 17]], Normalization::CauchySchwarz);
        for r in 0..3 {
            assert!(a.row(r).iter().zip(b.row(r)).all(|(x, y)| (x - y).abs() < 1e-12), "{kind:?} row {r}");
        }
        assert!(a.row(3) != b.row(3));
    }
}

#[test]
fn batched_sequences_do_not_interact() {
    let model = tiny_model(HeadKind::Csa);
    let both = hidden(&model, &[&[1, 2, 3], &[5, 6]], Normalization::Plain);
    let first = hidden(&model, &[&[1, 2, 3]], Normalization::Plain);
    let second = hidden(&model, &[&[5, 6]], Normalization::Plain);
    let mut worst = 0.0f64;
    for r in 0..3 {
        worst = first.row(r).iter().zip(both.row(r)).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    for r in 0..2 {
        worst = second.row(r).iter().zip(both.row(r + 3)).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn target_rank_matches_full_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = Tensor::randn(&[12, 4], 1.0, &mut rng);
    let h = [0.3, -1.0, 0.5, 2.0];
    let candidates: Vec<usize> = (0..12).collect();
    let full = rank_items(&h, &emb, &candidates, 12).unwrap();
    for (pos, &item) in full.items.iter().enumerate() {
        assert_eq!(target_rank(&h, &emb, &candidates, item).unwrap(), pos + 1);
    }
    assert!(full.scores.windows(2).all(|w| w[0] >= w[1]));
}

fn small_stream(blocks: usize) -> Vec<DataBlock> {
    generate_synthetic_stream(&SyntheticConfig {
        n_users: 24,
        n_items: 60,
        blocks,
        seed: 2,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn fast_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 2,
        refresh_interval: 1,
        ..TrainConfig::default()
    };
    cfg.model.d = 16;
    cfg.model.d_ff = 16;
    cfg
}

#[test]
fn stream_reports_are_well_formed() {
    let blocks = small_stream(3);
    for regime in [Regime::FineTune, Regime::FullBatch] {
        let cfg = TrainConfig { regime, ..fast_config() };
        let (state, reports) = run_stream(&cfg, &blocks, &mut StreamHooks::default()).unwrap();
        assert_eq!(state.block, 3);
        assert_eq!(reports.len(), 3);
        for (t, r) in reports.iter().enumerate() {
            let m = &r.metrics;
            assert_eq!(m.block, t + 1);
            assert_eq!(m.block_recall.len(), t + 1);
            assert_eq!(m.ra.is_some(), t > 0);
            for v in m.recall.values().chain(m.ndcg.values()).chain([&m.la, &m.hmean]) {
                assert!((0.0..=1.0).contains(v));
            }
            if let Some(ra) = m.ra {
                let expect = if ra + m.la > 0.0 { 2.0 * ra * m.la / (ra + m.la) } else { 0.0 };
                assert!((m.hmean - expect).abs() < 1e-12);
            }
            assert_eq!(r.epochs.len(), 2);
        }
    }
}

#[test]
fn state_bytes_round_trip() {
    let blocks = small_stream(2);
    let (state, _) = run_stream(&fast_config(), &blocks, &mut StreamHooks::default()).unwrap();
    let bytes = state.to_bytes().unwrap();
    let back = StreamState::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(StreamState::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn held_out_targets_never_enter_memories() {
    let blocks = small_stream(1);
    let cfg = fast_config();
    let mut state = StreamState::new(&cfg, blocks[0].max_item().unwrap() + 1).unwrap();
    let data = BlockData::new(&blocks[0], cfg.model.max_seq_len);
    let fresh = state.clone();
    commit_block(&mut state, &data).unwrap();
    let (&user, input) = data.split.train.iter().next().unwrap();
    let expect = block_memories(&fresh, &[(user, input.as_slice())]).unwrap();
    assert_eq!(state.memories.get(user).unwrap().pairs, expect[0]);
    let full = &blocks[0].sequences[&user].items;
    let with_target = block_memories(&fresh, &[(user, full.as_slice())]).unwrap();
    assert_ne!(with_target[0], expect[0]);
}

#[test]
fn blocks_must_arrive_in_order() {
    let blocks = small_stream(2);
    let cfg = fast_config();
    let mut state = StreamState::new(&cfg, 60).unwrap();
    let second = BlockData::new(&blocks[1], cfg.model.max_seq_len);
    let err = fit_block(&mut state, &second, &[], &mut FitHooks::default()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    assert!(matches!(commit_block(&mut state, &second), Err(Error::Usage(_))));
}

#[test]
fn exploding_updates_report_divergence() {
    let blocks = small_stream(1);
    let cfg = TrainConfig { lr: 1e200, epochs: 5, ..fast_config() };
    let err = run_stream(&cfg, &blocks, &mut StreamHooks::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = fast_config();
    cfg.model.heads = 3;
    assert!(matches!(StreamState::new(&cfg, 10), Err(Error::Config(_))));
    let cfg = TrainConfig { refresh_interval: 0, ..fast_config() };
    assert!(matches!(StreamState::new(&cfg, 10), Err(Error::Config(_))));
}
