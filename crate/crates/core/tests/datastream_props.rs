use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamrec::datastream::{
    generate_synthetic_stream, ingest_str, leave_one_out, read_blocks, sample_negatives,
    split_blocks, write_blocks, BlockSpec, Interaction, SyntheticConfig,
};

fn interactions() -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((0usize..12, 0usize..30, 0u64..1000), 1..80).prop_map(|v| {
        v.into_iter()
            .map(|(user, item, timestamp)| Interaction { user, item, timestamp })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every interaction lands in exactly one block, and item sets only grow.
    #[test]
    fn blocks_partition_the_log(xs in interactions(), n in 1usize..5) {
        let span = xs.iter().map(|x| x.timestamp).max().unwrap() - xs.iter().map(|x| x.timestamp).min().unwrap();
        prop_assume!(span as usize >= n);
        let blocks = split_blocks(&xs, &BlockSpec::Count(n)).unwrap();
        prop_assert_eq!(blocks.len(), n);
        let total: usize = blocks.iter().map(|b| b.n_interactions).sum();
        prop_assert_eq!(total, xs.len());
        let mut seen_users = BTreeSet::new();
        for (i, b) in blocks.iter().enumerate() {
            prop_assert_eq!(b.index, i + 1);
            prop_assert!(b.items.is_subset(&b.cumulative_items));
            if i > 0 {
                prop_assert!(blocks[i - 1].cumulative_items.is_subset(&b.cumulative_items));
            }
            let fresh: BTreeSet<usize> = b.users.difference(&seen_users).copied().collect();
            prop_assert_eq!(&fresh, &b.new_users);
            seen_users.extend(b.users.iter().copied());
            let seq_total: usize = b.sequences.values().map(|s| s.items.len()).sum();
            prop_assert_eq!(seq_total, b.n_interactions);
        }
    }

    #[test]
    fn leave_one_out_holds_out_last_item(xs in interactions()) {
        let blocks = split_blocks(&xs, &BlockSpec::Count(1)).unwrap();
        let b = &blocks[0];
        let split = leave_one_out(b);
        prop_assert_eq!(split.train.len() + split.excluded, b.sequences.len());
        for (u, train) in &split.train {
            let items = &b.sequences[u].items;
            prop_assert_eq!(&items[..items.len() - 1], train.as_slice());
            prop_assert_eq!(split.targets[u], *items.last().unwrap());
        }
    }

    #[test]
    fn negatives_are_distinct_and_unseen(
        exclude in prop::collection::btree_set(0usize..40, 0..20),
        n_neg in 1usize..4,
        seed in any::<u64>(),
    ) {
        let pool: BTreeSet<usize> = (0..40).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let negs = sample_negatives(&exclude, &pool, n_neg, 5, &mut rng).unwrap();
        prop_assert_eq!(negs.len(), 5);
        for row in negs {
            let set: BTreeSet<usize> = row.iter().copied().collect();
            prop_assert_eq!(set.len(), n_neg);
            prop_assert!(set.is_disjoint(&exclude));
        }
    }
}

#[test]
fn ingest_remaps_ids_by_first_appearance_in_time() {
    let ing = ingest_str("user,item,ts\nb,y,5\na,x,9\na,y,1\n").unwrap();
    assert_eq!(ing.user_names, vec!["a", "b"]);
    assert_eq!(ing.item_names, vec!["y", "x"]);
    let a: Vec<usize> = ing.interactions.iter().filter(|x| x.user == 0).map(|x| x.item).collect();
    assert_eq!(a, vec![0, 1]);
}

#[test]
fn blocks_survive_a_disk_round_trip() {
    let blocks = generate_synthetic_stream(&SyntheticConfig {
        n_users: 20,
        n_items: 40,
        blocks: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_blocks(dir.path(), &blocks).unwrap();
    assert_eq!(read_blocks(dir.path()).unwrap(), blocks);
}

#[test]
fn boundaries_must_increase() {
    let xs = [Interaction { user: 0, item: 0, timestamp: 3 }];
    assert!(split_blocks(&xs, &BlockSpec::Boundaries(vec![5, 5])).is_err());
}

#[test]
fn too_few_candidates_is_a_sampling_error() {
    let pool: BTreeSet<usize> = (0..3).collect();
    let exclude: BTreeSet<usize> = (0..2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_negatives(&exclude, &pool, 2, 1, &mut rng).is_err());
}
