use std::collections::{BTreeMap, BTreeSet};

use crate::datastream::{leave_one_out, BlockSplit, DataBlock};

/// One block prepared for training and evaluation.
#[derive(Clone, Debug)]
pub struct BlockData<'a> {
    pub block: &'a DataBlock,
    pub split: BlockSplit,
    /// Model input of every user in the block: the training part of the
    /// sequence (the whole sequence when it is too short to split), keeping
    /// at most `max_seq_len` most recent items.
    pub inputs: BTreeMap<usize, Vec<usize>>,
    /// Items each user touched in the block, excluded from negatives.
    pub seen: BTreeMap<usize, BTreeSet<usize>>,
}

fn tail(items: &[usize], max_len: usize) -> Vec<usize> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

impl<'a> BlockData<'a> {
    pub fn new(block: &'a DataBlock, max_seq_len: usize) -> Self {
        let split = leave_one_out(block);
        let inputs = block
            .sequences
            .values()
            .map(|s| {
                let items = split.train.get(&s.user).unwrap_or(&s.items);
                (s.user, tail(items, max_seq_len))
            })
            .collect();
        let seen = block
            .sequences
            .values()
            .map(|s| (s.user, s.items.iter().copied().collect()))
            .collect();
        Self {
            block,
            split,
            inputs,
            seen,
        }
    }

    pub fn index(&self) -> usize {
        self.block.index
    }

    /// Users with at least one (input, target) pair in their training part.
    pub fn training_users(&self) -> Vec<usize> {
        self.split
            .train
            .keys()
            .copied()
            .filter(|u| self.inputs[u].len() >= 2)
            .collect()
    }

    /// (user, input, held-out target) for every evaluable user.
    pub fn eval_cases(&self) -> Vec<(usize, &[usize], usize)> {
        self.split
            .targets
            .iter()
            .map(|(&u, &t)| (u, self.inputs[&u].as_slice(), t))
            .collect()
    }
}
