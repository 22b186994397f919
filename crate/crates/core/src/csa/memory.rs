use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::phi;

/// Attention memory `s` (row-major `dk × dv`) and normalizer memory `z` (`dk`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryPair {
    pub dk: usize,
    pub dv: usize,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

impl MemoryPair {
    pub fn zeros(dk: usize, dv: usize) -> Self {
        Self {
            dk,
            dv,
            s: vec![0.0; dk * dv],
            z: vec![0.0; dk],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.s.iter().chain(&self.z).all(|v| v.is_finite())
    }

    fn check(&self, other: &MemoryPair) -> Result<()> {
        if self.dk != other.dk || self.dv != other.dv {
            return Err(Error::dim(
                "memory",
                format!("{}x{} vs {}x{}", self.dk, self.dv, other.dk, other.dv),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &MemoryPair) -> Result<()> {
        self.check(other)?;
        self.s.iter_mut().zip(&other.s).for_each(|(a, b)| *a += b);
        self.z.iter_mut().zip(&other.z).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scaled_add(&mut self, w: f64, other: &MemoryPair) -> Result<()> {
        self.check(other)?;
        self.s.iter_mut().zip(&other.s).for_each(|(a, b)| *a += w * b);
        self.z.iter_mut().zip(&other.z).for_each(|(a, b)| *a += w * b);
        Ok(())
    }

    /// Absorbs one feature-mapped key and its value.
    pub fn absorb(&mut self, fk: &[f64], v: &[f64]) {
        for r in 0..self.dk {
            let row = &mut self.s[r * self.dv..(r + 1) * self.dv];
            for (c, x) in row.iter_mut().enumerate() {
                *x += fk[r] * v[c];
            }
            self.z[r] += fk[r];
        }
    }
}

/// Within-block memories after the first `upto` positions, accumulated
/// recurrently: `s̃ = Σ φ(k_j) v_jᵀ`, `z̃ = Σ φ(k_j)`. `keys` are raw keys
/// (`n × dk`), `values` are `n × dv`.
pub fn acquire_current(keys: &[f64], values: &[f64], dk: usize, dv: usize, upto: usize) -> MemoryPair {
    let mut m = MemoryPair::zeros(dk, dv);
    let mut fk = vec![0.0; dk];
    for j in 0..upto {
        for (f, &k) in fk.iter_mut().zip(&keys[j * dk..(j + 1) * dk]) {
            *f = phi(k);
        }
        m.absorb(&fk, &values[j * dv..(j + 1) * dv]);
    }
    m
}

/// Same as [`acquire_current`] for keys that are already feature-mapped.
pub fn accumulate_mapped(fk: &[f64], values: &[f64], dk: usize, dv: usize) -> MemoryPair {
    let mut m = MemoryPair::zeros(dk, dv);
    let n = fk.len() / dk.max(1);
    for j in 0..n {
        m.absorb(&fk[j * dk..(j + 1) * dk], &values[j * dv..(j + 1) * dv]);
    }
    m
}

/// `s = s_hist + Δs_H + s̃ + Δs_C`, and likewise for `z`.
pub fn integrate(
    historical: &MemoryPair,
    delta_h: Option<&MemoryPair>,
    current: &MemoryPair,
    delta_c: Option<&MemoryPair>,
) -> Result<MemoryPair> {
    let mut m = historical.clone();
    if let Some(d) = delta_h {
        m.add_assign(d)?;
    }
    m.add_assign(current)?;
    if let Some(d) = delta_c {
        m.add_assign(d)?;
    }
    Ok(m)
}

fn read_out(fq: &[f64], m: &MemoryPair) -> Vec<f64> {
    let mut out = vec![0.0; m.dv];
    for (r, &q) in fq.iter().enumerate() {
        for (o, &s) in out.iter_mut().zip(&m.s[r * m.dv..(r + 1) * m.dv]) {
            *o += q * s;
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `φ(q)ᵀ s / φ(q)ᵀ z` for a feature-mapped query.
pub fn attention_output_plain(fq: &[f64], m: &MemoryPair) -> Result<Vec<f64>> {
    let den: f64 = fq.iter().zip(&m.z).map(|(a, b)| a * b).sum();
    if den <= 0.0 {
        return Err(Error::Degenerate("empty memory: no key has been absorbed".into()));
    }
    let mut out = read_out(fq, m);
    out.iter_mut().for_each(|o| *o /= den);
    Ok(out)
}

/// `(φ(q)/‖φ(q)‖)ᵀ (s/‖z‖)` for a feature-mapped query.
pub fn csn_output(fq: &[f64], m: &MemoryPair) -> Result<Vec<f64>> {
    let (nq, nz) = (norm(fq), norm(&m.z));
    if nq == 0.0 || nz == 0.0 {
        return Err(Error::Degenerate("zero-norm query or normalizer memory".into()));
    }
    let mut out = read_out(fq, m);
    out.iter_mut().for_each(|o| *o /= nq * nz);
    Ok(out)
}

/// Cosine between a feature-mapped query and the normalizer memory.
pub fn cos_query_normalizer(fq: &[f64], m: &MemoryPair) -> f64 {
    let dot: f64 = fq.iter().zip(&m.z).map(|(a, b)| a * b).sum();
    dot / (norm(fq) * norm(&m.z))
}
