use rand::{Rng, RngCore};

use super::model::{HeadKind, LayerParams, ModelParameters};
use crate::error::{Error, Result};
use crate::numerics::{
    concat_cols, linear_attention, softmax_attention, Bound, Normalization, Tensor, Var,
};

/// Memory seed added to every prefix memory of a CSA head, one row per
/// sequence: `s` is `[B, dh·dh]` (row-major `dh × dh` per row), `z` is `[B, dh]`.
#[derive(Clone, Copy, Debug)]
pub struct MemorySeed<'t> {
    pub s: Var<'t>,
    pub z: Var<'t>,
}

/// Seeds indexed `[layer][head]`.
pub type MemorySeeds<'t> = Vec<Vec<MemorySeed<'t>>>;

/// Per-head intermediates kept for memory updates and diagnostics. For CSA
/// heads `queries` and `keys` hold the feature-mapped φ(Q) and φ(K).
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace<'t> {
    pub queries: Var<'t>,
    pub keys: Var<'t>,
    pub values: Var<'t>,
    pub output: Var<'t>,
}

#[derive(Debug)]
pub struct Encoded<'t> {
    /// Final hidden states, sequences stacked row-wise.
    pub hidden: Var<'t>,
    pub segments: Vec<usize>,
    pub heads: Vec<Vec<HeadTrace<'t>>>,
}

impl Encoded<'_> {
    /// Rows holding the last position of each sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments[1..].iter().map(|&e| e - 1).collect()
    }
}

pub fn segments_of(seqs: &[&[usize]]) -> Vec<usize> {
    let mut segs = Vec::with_capacity(seqs.len() + 1);
    segs.push(0);
    for s in seqs {
        segs.push(segs.last().unwrap() + s.len());
    }
    segs
}

/// Forward configuration. Dropout is applied only when a generator is given
/// (training mode).
pub struct EncodeOptions<'r> {
    pub norm: Normalization,
    pub dropout_rng: Option<&'r mut dyn RngCore>,
}

impl EncodeOptions<'_> {
    pub fn eval(norm: Normalization) -> Self {
        Self {
            norm,
            dropout_rng: None,
        }
    }
}

fn dropout<'t>(x: Var<'t>, p: f64, rng: Option<&mut (dyn RngCore + '_)>) -> Result<Var<'t>> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    x.mul(x.tape().constant(Tensor::new(shape, mask)?))
}

/// Stacked item embeddings, plus positional rows when enabled.
pub fn embed<'t>(model: &ModelParameters, bound: &Bound<'t>, seqs: &[&[usize]]) -> Result<Var<'t>> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Degenerate("cannot encode an empty sequence".into()));
    }
    let items: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let h = bound.get(model.item_emb).gather_rows(&items)?;
    match model.pos_emb {
        Some(pos) => {
            let max = model.config.max_seq_len;
            if let Some(s) = seqs.iter().find(|s| s.len() > max) {
                return Err(Error::Index {
                    index: s.len() - 1,
                    len: max,
                });
            }
            let idx: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
            h.add(bound.get(pos).gather_rows(&idx)?)
        }
        None => Ok(h),
    }
}

fn layer_forward<'t>(
    model: &ModelParameters,
    p: &LayerParams,
    bound: &Bound<'t>,
    h: Var<'t>,
    segments: &[usize],
    seeds: Option<&[MemorySeed<'t>]>,
    opts: &mut EncodeOptions<'_>,
) -> Result<(Var<'t>, Vec<HeadTrace<'t>>)> {
    let cfg = &model.config;
    let mut traces = Vec::with_capacity(cfg.heads);
    let mut outs = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let q = h.matmul(bound.get(p.wq[i]))?;
        let k = h.matmul(bound.get(p.wk[i]))?;
        let v = h.matmul(bound.get(p.wv[i]))?;
        let (queries, keys, out) = match cfg.head_kind {
            HeadKind::SelfAttention => {
                let scale = 1.0 / (cfg.d as f64).sqrt();
                (q, k, softmax_attention(q, k, v, segments, scale)?)
            }
            HeadKind::Csa => {
                let fq = q.phi()?;
                let fk = k.phi()?;
                let seed = seeds.map(|s| s[i]);
                let out = linear_attention(
                    fq,
                    fk,
                    v,
                    seed.map(|s| s.s),
                    seed.map(|s| s.z),
                    segments,
                    opts.norm,
                )?;
                (fq, fk, out)
            }
        };
        traces.push(HeadTrace {
            queries,
            keys,
            values: v,
            output: out,
        });
        outs.push(out);
    }
    let mh = concat_cols(&outs)?.matmul(bound.get(p.wo))?;
    let mh = dropout(mh, cfg.dropout, opts.dropout_rng.as_deref_mut())?;
    let eps = cfg.layer_norm_eps;
    let g = h
        .add(mh)?
        .layer_norm(bound.get(p.ln1_gain), bound.get(p.ln1_bias), eps)?;
    let f = g
        .matmul(bound.get(p.ffn_w1))?
        .add_rowwise(bound.get(p.ffn_b1))?
        .relu()?
        .matmul(bound.get(p.ffn_w2))?
        .add_rowwise(bound.get(p.ffn_b2))?;
    let f = dropout(f, cfg.dropout, opts.dropout_rng.as_deref_mut())?;
    let out = g
        .add(f)?
        .layer_norm(bound.get(p.ln2_gain), bound.get(p.ln2_bias), eps)?;
    Ok((out, traces))
}

/// Runs the full encoder over a batch of sequences.
pub fn encode<'t>(
    model: &ModelParameters,
    bound: &Bound<'t>,
    seqs: &[&[usize]],
    seeds: Option<&MemorySeeds<'t>>,
    mut opts: EncodeOptions<'_>,
) -> Result<Encoded<'t>> {
    let segments = segments_of(seqs);
    let mut h = embed(model, bound, seqs)?;
    let mut heads = Vec::with_capacity(model.layers.len());
    for (l, p) in model.layers.iter().enumerate() {
        let layer_seeds = seeds.map(|s| s[l].as_slice());
        let (next, traces) = layer_forward(model, p, bound, h, &segments, layer_seeds, &mut opts)?;
        h = next;
        heads.push(traces);
    }
    Ok(Encoded {
        hidden: h,
        segments,
        heads,
    })
}

/// Row-aligned positives and sampled negatives for the next-item loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BceTargets {
    pub rows: Vec<usize>,
    pub items: Vec<usize>,
    pub labels: Vec<f64>,
    pub n_sequences: usize,
}

/// Position `j` of each sequence predicts item `j + 1`; `negatives[b][j]`
/// are the sampled negatives for that position.
pub fn bce_targets(seqs: &[&[usize]], negatives: &[Vec<Vec<usize>>]) -> Result<BceTargets> {
    let segments = segments_of(seqs);
    let mut t = BceTargets::default();
    for (b, seq) in seqs.iter().enumerate() {
        let n_pos = seq.len().saturating_sub(1);
        if negatives.get(b).map_or(0, Vec::len) != n_pos {
            return Err(Error::dim("bce_targets", format!("negatives for sequence {b}")));
        }
        if n_pos > 0 {
            t.n_sequences += 1;
        }
        for j in 0..n_pos {
            let row = segments[b] + j;
            t.rows.push(row);
            t.items.push(seq[j + 1]);
            t.labels.push(1.0);
            for &neg in &negatives[b][j] {
                t.rows.push(row);
                t.items.push(neg);
                t.labels.push(0.0);
            }
        }
    }
    Ok(t)
}

/// Clamp applied to σ before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy summed over positions and averaged over sequences.
pub fn bce_loss<'t>(hidden: Var<'t>, emb: Var<'t>, targets: &BceTargets) -> Result<Var<'t>> {
    if targets.n_sequences == 0 {
        return Err(Error::Degenerate("no (input, target) pairs in batch".into()));
    }
    let h = hidden.gather_rows(&targets.rows)?;
    let e = emb.gather_rows(&targets.items)?;
    h.row_dot(e)?
        .bce_with_logits(&targets.labels, BCE_EPS)?
        .mul_scalar(1.0 / targets.n_sequences as f64)
}
