//! Fused causal attention kernels used by the tape.
//!
//! Both kernels operate on a batch of independent sequences stacked row-wise;
//! `segments` holds the row offsets `[0, n_1, n_1 + n_2, ..., T]`.

use crate::error::{Error, Result};

/// Denominator used by kernelized (linear) attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Normalization {
    /// `φ(q)ᵀ s / φ(q)ᵀ z`
    Plain,
    /// `φ(q)ᵀ s / (‖φ(q)‖ ‖z‖)`, the Cauchy-Schwarz upper bound of the plain
    /// denominator.
    CauchySchwarz,
}

pub(crate) struct LinearAttentionShape<'a> {
    pub segments: &'a [usize],
    pub dk: usize,
    pub dv: usize,
    pub norm: Normalization,
}

fn denominator(fq: &[f64], z: &[f64], norm: Normalization) -> Result<f64> {
    match norm {
        Normalization::Plain => {
            let den: f64 = fq.iter().zip(z).map(|(a, b)| a * b).sum();
            if den > 0.0 {
                Ok(den)
            } else {
                Err(Error::Degenerate(format!(
                    "linear attention denominator {den} is not positive"
                )))
            }
        }
        Normalization::CauchySchwarz => {
            let nq = fq.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nq > 0.0 && nz > 0.0 {
                Ok(nq * nz)
            } else {
                Err(Error::Degenerate(
                    "zero-norm query or normalizer memory".into(),
                ))
            }
        }
    }
}

/// Causal kernelized attention. `fq`, `fk` are T×dk feature-mapped queries
/// and keys, `v` is T×dv. `s0` (B×dk·dv) and `z0` (B×dk) seed each segment's
/// memories; absent means zero.
pub(crate) fn linear_attention_forward(
    shape: &LinearAttentionShape<'_>,
    fq: &[f64],
    fk: &[f64],
    v: &[f64],
    s0: Option<&[f64]>,
    z0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let (dk, dv) = (shape.dk, shape.dv);
    let total = *shape.segments.last().unwrap_or(&0);
    let mut out = vec![0.0; total * dv];
    let mut s = vec![0.0; dk * dv];
    let mut z = vec![0.0; dk];
    for (b, w) in shape.segments.windows(2).enumerate() {
        match s0 {
            Some(s0) => s.copy_from_slice(&s0[b * dk * dv..(b + 1) * dk * dv]),
            None => s.fill(0.0),
        }
        match z0 {
            Some(z0) => z.copy_from_slice(&z0[b * dk..(b + 1) * dk]),
            None => z.fill(0.0),
        }
        for i in w[0]..w[1] {
            let ki = &fk[i * dk..(i + 1) * dk];
            let vi = &v[i * dv..(i + 1) * dv];
            for r in 0..dk {
                let kr = ki[r];
                let row = &mut s[r * dv..(r + 1) * dv];
                for c in 0..dv {
                    row[c] += kr * vi[c];
                }
                z[r] += kr;
            }
            let qi = &fq[i * dk..(i + 1) * dk];
            let den = denominator(qi, &z, shape.norm)?;
            let oi = &mut out[i * dv..(i + 1) * dv];
            for r in 0..dk {
                let qr = qi[r];
                let row = &s[r * dv..(r + 1) * dv];
                for c in 0..dv {
                    oi[c] += qr * row[c];
                }
            }
            oi.iter_mut().for_each(|o| *o /= den);
        }
    }
    Ok(out)
}

pub(crate) struct LinearAttentionGrads {
    pub fq: Vec<f64>,
    pub fk: Vec<f64>,
    pub v: Vec<f64>,
    pub s0: Vec<f64>,
    pub z0: Vec<f64>,
}

/// Reverse pass of [`linear_attention_forward`]. Runs in O(T·dk·dv) time
/// with O(T·(dk + dv)) scratch: prefix memories are recomputed in a forward
/// sweep, suffix sums of their adjoints are accumulated in a reverse sweep.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_attention_backward(
    shape: &LinearAttentionShape<'_>,
    fq: &[f64],
    fk: &[f64],
    v: &[f64],
    s0: Option<&[f64]>,
    z0: Option<&[f64]>,
    out: &[f64],
    g: &[f64],
) -> LinearAttentionGrads {
    let (dk, dv) = (shape.dk, shape.dv);
    let total = *shape.segments.last().unwrap_or(&0);
    let n_seg = shape.segments.len().saturating_sub(1);
    let mut grads = LinearAttentionGrads {
        fq: vec![0.0; total * dk],
        fk: vec![0.0; total * dk],
        v: vec![0.0; total * dv],
        s0: vec![0.0; n_seg * dk * dv],
        z0: vec![0.0; n_seg * dk],
    };
    let mut dnum = vec![0.0; total * dv];
    let mut dz_pos = vec![0.0; total * dk];
    let mut s = vec![0.0; dk * dv];
    let mut z = vec![0.0; dk];
    let mut rs = vec![0.0; dk * dv];
    let mut rz = vec![0.0; dk];

    for (b, w) in shape.segments.windows(2).enumerate() {
        match s0 {
            Some(s0) => s.copy_from_slice(&s0[b * dk * dv..(b + 1) * dk * dv]),
            None => s.fill(0.0),
        }
        match z0 {
            Some(z0) => z.copy_from_slice(&z0[b * dk..(b + 1) * dk]),
            None => z.fill(0.0),
        }
        // Forward sweep: rebuild S_i, Z_i and form the query-side adjoints.
        for i in w[0]..w[1] {
            let ki = &fk[i * dk..(i + 1) * dk];
            let vi = &v[i * dv..(i + 1) * dv];
            for r in 0..dk {
                let row = &mut s[r * dv..(r + 1) * dv];
                for c in 0..dv {
                    row[c] += ki[r] * vi[c];
                }
                z[r] += ki[r];
            }
            let qi = &fq[i * dk..(i + 1) * dk];
            let gi = &g[i * dv..(i + 1) * dv];
            let ai = &out[i * dv..(i + 1) * dv];
            let w_ga: f64 = gi.iter().zip(ai).map(|(x, y)| x * y).sum();
            let dqi = &mut grads.fq[i * dk..(i + 1) * dk];
            let dni = &mut dnum[i * dv..(i + 1) * dv];
            let dzi = &mut dz_pos[i * dk..(i + 1) * dk];
            match shape.norm {
                Normalization::Plain => {
                    let den: f64 = qi.iter().zip(&z).map(|(a, b)| a * b).sum();
                    for c in 0..dv {
                        dni[c] = gi[c] / den;
                    }
                    let dden = -w_ga / den;
                    for r in 0..dk {
                        dqi[r] += dden * z[r];
                        dzi[r] = dden * qi[r];
                    }
                }
                Normalization::CauchySchwarz => {
                    let nq2: f64 = qi.iter().map(|x| x * x).sum();
                    let nz2: f64 = z.iter().map(|x| x * x).sum();
                    let den = (nq2 * nz2).sqrt();
                    for c in 0..dv {
                        dni[c] = gi[c] / den;
                    }
                    for r in 0..dk {
                        dqi[r] -= w_ga / nq2 * qi[r];
                        dzi[r] = -w_ga / nz2 * z[r];
                    }
                }
            }
            for r in 0..dk {
                let row = &s[r * dv..(r + 1) * dv];
                dqi[r] += row.iter().zip(dni.iter()).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        // Reverse sweep: suffix sums of dS_i = φq_i dnum_iᵀ and dZ_i.
        rs.fill(0.0);
        rz.fill(0.0);
        for i in (w[0]..w[1]).rev() {
            let qi = &fq[i * dk..(i + 1) * dk];
            let dni = &dnum[i * dv..(i + 1) * dv];
            let dzi = &dz_pos[i * dk..(i + 1) * dk];
            for r in 0..dk {
                let row = &mut rs[r * dv..(r + 1) * dv];
                for c in 0..dv {
                    row[c] += qi[r] * dni[c];
                }
                rz[r] += dzi[r];
            }
            let ki = &fk[i * dk..(i + 1) * dk];
            let vi = &v[i * dv..(i + 1) * dv];
            let dki = &mut grads.fk[i * dk..(i + 1) * dk];
            let dvi = &mut grads.v[i * dv..(i + 1) * dv];
            for r in 0..dk {
                let row = &rs[r * dv..(r + 1) * dv];
                dki[r] += row.iter().zip(vi).map(|(x, y)| x * y).sum::<f64>() + rz[r];
                for c in 0..dv {
                    dvi[c] += row[c] * ki[r];
                }
            }
        }
        grads.s0[b * dk * dv..(b + 1) * dk * dv].copy_from_slice(&rs);
        grads.z0[b * dk..(b + 1) * dk].copy_from_slice(&rz);
    }
    grads
}

/// Causal softmax attention `softmax(q kᵀ · scale) v` per segment. When
/// `keep_probs` is set the lower-triangular probabilities are returned for
/// the backward pass; otherwise memory stays O(T·d).
pub(crate) fn softmax_attention_forward(
    segments: &[usize],
    d: usize,
    scale: f64,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let total = *segments.last().unwrap_or(&0);
    let mut out = vec![0.0; total * d];
    let mut probs = Vec::new();
    let mut row = Vec::new();
    for w in segments.windows(2) {
        let start = w[0];
        for i in start..w[1] {
            let qi = &q[i * d..(i + 1) * d];
            row.clear();
            let mut max = f64::NEG_INFINITY;
            for j in start..=i {
                let kj = &k[j * d..(j + 1) * d];
                let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(sc);
                row.push(sc);
            }
            let mut total_w = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                total_w += *p;
            }
            let oi = &mut out[i * d..(i + 1) * d];
            for (jj, p) in row.iter_mut().enumerate() {
                *p /= total_w;
                let vj = &v[(start + jj) * d..(start + jj + 1) * d];
                for c in 0..d {
                    oi[c] += *p * vj[c];
                }
            }
            if keep_probs {
                probs.extend_from_slice(&row);
            }
        }
    }
    (out, probs)
}

pub(crate) struct SoftmaxAttentionGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn softmax_attention_backward(
    segments: &[usize],
    d: usize,
    scale: f64,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
) -> SoftmaxAttentionGrads {
    let total = *segments.last().unwrap_or(&0);
    let mut grads = SoftmaxAttentionGrads {
        q: vec![0.0; total * d],
        k: vec![0.0; total * d],
        v: vec![0.0; total * d],
    };
    let mut offset = 0;
    let mut dp = Vec::new();
    for w in segments.windows(2) {
        let start = w[0];
        for i in start..w[1] {
            let n = i - start + 1;
            let p = &probs[offset..offset + n];
            offset += n;
            let gi = &g[i * d..(i + 1) * d];
            dp.clear();
            let mut weighted = 0.0;
            for (jj, pj) in p.iter().enumerate() {
                let j = start + jj;
                let vj = &v[j * d..(j + 1) * d];
                let dpj: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += pj * dpj;
                dp.push(dpj);
                let dvj = &mut grads.v[j * d..(j + 1) * d];
                for c in 0..d {
                    dvj[c] += pj * gi[c];
                }
            }
            let qi = &q[i * d..(i + 1) * d];
            for (jj, pj) in p.iter().enumerate() {
                let j = start + jj;
                let ds = pj * (dp[jj] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d..(j + 1) * d];
                for c in 0..d {
                    grads.q[i * d + c] += ds * kj[c];
                    grads.k[j * d + c] += ds * qi[c];
                }
            }
        }
    }
    grads
}
