use crate::backbone::{encode, EncodeOptions, ModelParameters};
use crate::csa::{historical_seeds, UserMemoryStore};
use crate::error::{Error, Result};
use crate::numerics::{Normalization, Tape};

const CHUNK: usize = 64;

/// Historical and current interest contexts of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserContexts {
    pub historical: Vec<f64>,
    pub current: Vec<f64>,
}

fn last_hidden(
    model: &ModelParameters,
    store: Option<&UserMemoryStore>,
    inputs: &[(usize, &[usize])],
    norm: Normalization,
) -> Result<Vec<Vec<f64>>> {
    if inputs.iter().any(|(_, s)| s.is_empty()) {
        return Err(Error::Degenerate("context of an empty sequence".into()));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let tape = Tape::no_grad();
        let bound = model.store.bind(&tape);
        let users: Vec<usize> = chunk.iter().map(|(u, _)| *u).collect();
        let seqs: Vec<&[usize]> = chunk.iter().map(|(_, s)| *s).collect();
        let seeds = store.map(|st| historical_seeds(&tape, st, &users));
        let enc = encode(model, &bound, &seqs, seeds.as_ref(), EncodeOptions::eval(norm))?;
        let h = enc.hidden.value();
        out.extend(enc.last_rows().into_iter().map(|r| h.row(r).to_vec()));
    }
    Ok(out)
}

/// Last hidden state using only within-block memories.
pub fn current_contexts(
    model: &ModelParameters,
    inputs: &[(usize, &[usize])],
    norm: Normalization,
) -> Result<Vec<Vec<f64>>> {
    last_hidden(model, None, inputs, norm)
}

/// Last hidden state using historical plus within-block memories. Pool
/// enrichment is never applied here.
pub fn historical_contexts(
    model: &ModelParameters,
    store: &UserMemoryStore,
    inputs: &[(usize, &[usize])],
    norm: Normalization,
) -> Result<Vec<Vec<f64>>> {
    last_hidden(model, Some(store), inputs, norm)
}

pub fn extract_contexts(
    model: &ModelParameters,
    store: &UserMemoryStore,
    inputs: &[(usize, &[usize])],
    norm: Normalization,
) -> Result<Vec<UserContexts>> {
    let cur = current_contexts(model, inputs, norm)?;
    let hist = historical_contexts(model, store, inputs, norm)?;
    Ok(hist
        .into_iter()
        .zip(cur)
        .map(|(historical, current)| UserContexts { historical, current })
        .collect())
}
