use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{MemorySeeds, ModelParameters};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tensor, Var};

/// Init std of pool keys and patterns.
pub const POOL_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Historical,
    Current,
}

impl PoolKind {
    fn name(self) -> &'static str {
        match self {
            PoolKind::Historical => "historical",
            PoolKind::Current => "current",
        }
    }
}

/// Learnable (key, pattern) pairs. Keys are `[size, d]`; patterns are
/// stacked as `[size · pattern_len, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestPool {
    pub kind: PoolKind,
    pub keys: ParamId,
    pub patterns: ParamId,
    pub size: usize,
    pub pattern_len: usize,
}

fn key_name(kind: PoolKind) -> String {
    format!("pool.{}.keys", kind.name())
}

fn pattern_name(kind: PoolKind) -> String {
    format!("pool.{}.patterns", kind.name())
}

impl InterestPool {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: PoolKind,
        size: usize,
        pattern_len: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 || pattern_len == 0 {
            return Err(Error::Config(format!("{} pool must be non-empty", kind.name())));
        }
        let keys = store.register(key_name(kind), Tensor::randn(&[size, d], POOL_INIT_STD, rng))?;
        let patterns = store.register(
            pattern_name(kind),
            Tensor::randn(&[size * pattern_len, d], POOL_INIT_STD, rng),
        )?;
        Ok(Self {
            kind,
            keys,
            patterns,
            size,
            pattern_len,
        })
    }

    pub fn from_store(store: &ParamStore, kind: PoolKind, pattern_len: usize) -> Result<Self> {
        let keys = store
            .id(&key_name(kind))
            .ok_or_else(|| Error::Checkpoint(format!("missing {}", key_name(kind))))?;
        let patterns = store
            .id(&pattern_name(kind))
            .ok_or_else(|| Error::Checkpoint(format!("missing {}", pattern_name(kind))))?;
        let size = store.value(keys).rows();
        if store.value(patterns).rows() != size * pattern_len {
            return Err(Error::Checkpoint(format!("{} pool shape mismatch", kind.name())));
        }
        Ok(Self {
            kind,
            keys,
            patterns,
            size,
            pattern_len,
        })
    }

    pub fn key_matrix<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.keys)
    }

    pub fn pattern(&self, store: &ParamStore, index: usize) -> Tensor {
        let p = store.value(self.patterns);
        let d = p.cols();
        let rows = p.data()[index * self.pattern_len * d..(index + 1) * self.pattern_len * d].to_vec();
        Tensor::matrix(self.pattern_len, d, rows).expect("pattern shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterestPools {
    pub historical: InterestPool,
    pub current: InterestPool,
}

/// `1 - cos(a, b)`. A zero `b` counts as orthogonal.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Index of the key closest to `context` in cosine distance; the lowest
/// index wins ties.
pub fn match_key(context: &[f64], keys: &Tensor) -> Result<usize> {
    if context.iter().all(|&v| v == 0.0) {
        return Err(Error::Matching("zero context vector".into()));
    }
    if keys.rows() == 0 || keys.cols() != context.len() {
        return Err(Error::dim("match_key", format!("{:?} vs {}", keys.shape(), context.len())));
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..keys.rows() {
        let g = cosine_distance(context, keys.row(i));
        if g < best.1 {
            best = (i, g);
        }
    }
    Ok(best.0)
}

/// Enrichment deltas for every pool entry of one (layer, head):
/// `Δs = Σ_l φ(P_l W_K)(P_l W_V)ᵀ` as `[size, dh·dh]` and
/// `Δz = Σ_l φ(P_l W_K)` as `[size, dh]`.
pub fn compute_deltas<'t>(
    bound: &Bound<'t>,
    pool: &InterestPool,
    wk: Var<'t>,
    wv: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let p = bound.get(pool.patterns);
    let fk = p.matmul(wk)?.phi()?;
    let v = p.matmul(wv)?;
    let ds = fk.segment_outer_sum(v, pool.pattern_len)?;
    let dz = fk.segment_sum(pool.pattern_len)?;
    Ok((ds, dz))
}

/// Adds the deltas of the selected pool entries (one index per sequence)
/// to every (layer, head) seed.
pub fn enrich_seeds<'t>(
    seeds: &mut MemorySeeds<'t>,
    model: &ModelParameters,
    bound: &Bound<'t>,
    pool: &InterestPool,
    selected: &[usize],
) -> Result<()> {
    if let Some(&i) = selected.iter().find(|&&i| i >= pool.size) {
        return Err(Error::Index { index: i, len: pool.size });
    }
    for (l, layer) in model.layers.iter().enumerate() {
        for h in 0..model.config.heads {
            let (ds, dz) = compute_deltas(bound, pool, bound.get(layer.wk[h]), bound.get(layer.wv[h]))?;
            let seed = &mut seeds[l][h];
            seed.s = seed.s.add(ds.gather_rows(selected)?)?;
            seed.z = seed.z.add(dz.gather_rows(selected)?)?;
        }
    }
    Ok(())
}

/// `Σ_b γ(c_b, κ_{i_b})` with contexts held constant; gradients reach only
/// the selected keys.
pub fn matching_distance_sum<'t>(
    bound: &Bound<'t>,
    pool: &InterestPool,
    contexts: &[Vec<f64>],
    selected: &[usize],
) -> Result<Var<'t>> {
    if contexts.len() != selected.len() || contexts.is_empty() {
        return Err(Error::dim("matching loss", "one context per selected key"));
    }
    let keys = bound.get(pool.keys).gather_rows(selected)?;
    let d = contexts[0].len();
    let mut unit = Vec::with_capacity(contexts.len() * d);
    for c in contexts {
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Matching("zero context vector".into()));
        }
        unit.extend(c.iter().map(|v| v / n));
    }
    let tape = keys.tape();
    let unit = tape.constant(Tensor::matrix(contexts.len(), d, unit)?);
    let cos = keys.row_dot(unit)?.div(keys.row_norm()?)?;
    cos.neg()?.add_scalar(1.0)?.sum()
}
