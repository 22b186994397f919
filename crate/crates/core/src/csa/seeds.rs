use super::store::UserMemoryStore;
use crate::backbone::{MemorySeed, MemorySeeds};
use crate::numerics::{Tape, Tensor};

/// Historical memories of `users` as constant seeds, one row per user.
/// Users without stored memories contribute zero rows.
pub fn historical_seeds<'t>(tape: &'t Tape, store: &UserMemoryStore, users: &[usize]) -> MemorySeeds<'t> {
    let (dh, b) = (store.dh, users.len());
    (0..store.layers)
        .map(|l| {
            (0..store.heads)
                .map(|h| {
                    let mut s = vec![0.0; b * dh * dh];
                    let mut z = vec![0.0; b * dh];
                    for (i, &u) in users.iter().enumerate() {
                        if let Some(p) = store.pair(u, l, h) {
                            s[i * dh * dh..(i + 1) * dh * dh].copy_from_slice(&p.s);
                            z[i * dh..(i + 1) * dh].copy_from_slice(&p.z);
                        }
                    }
                    MemorySeed {
                        s: tape.constant(Tensor::matrix(b, dh * dh, s).expect("seed shape")),
                        z: tape.constant(Tensor::matrix(b, dh, z).expect("seed shape")),
                    }
                })
                .collect()
        })
        .collect()
}
