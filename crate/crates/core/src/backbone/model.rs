use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Attention mechanism used inside every Transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Causal softmax attention, quadratic in sequence length.
    SelfAttention,
    /// Kernelized linear attention with per-user memories.
    Csa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub head_kind: HeadKind,
    /// Learnable positional embeddings; when unset they are used for
    /// softmax attention only.
    pub positional: Option<bool>,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d: 64,
            d_ff: 64,
            dropout: 0.2,
            max_seq_len: 50,
            head_kind: HeadKind::Csa,
            positional: None,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.d_ff == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn uses_positional(&self) -> bool {
        self.positional
            .unwrap_or(self.head_kind == HeadKind::SelfAttention)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Embedding std for item rows, including rows added as the catalog grows.
pub const EMBEDDING_STD: f64 = 0.02;

/// Item embeddings and per-layer weights. The store may also hold other
/// trainable tensors (interest pools) that share the optimizer.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub item_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    pub layers: Vec<LayerParams>,
}

fn layer_names(l: usize, heads: usize) -> Vec<String> {
    let mut names = Vec::new();
    for h in 0..heads {
        names.push(format!("layer{l}.head{h}.wq"));
        names.push(format!("layer{l}.head{h}.wk"));
        names.push(format!("layer{l}.head{h}.wv"));
    }
    for n in ["wo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
        names.push(format!("layer{l}.{n}"));
    }
    names
}

impl ModelParameters {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, n_items: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, dh, dff) = (config.d, config.head_dim(), config.d_ff);
        let mut store = ParamStore::new();
        store.register("item_emb", Tensor::randn(&[n_items, d], EMBEDDING_STD, rng))?;
        if config.uses_positional() {
            store.register("pos_emb", Tensor::randn(&[config.max_seq_len, d], EMBEDDING_STD, rng))?;
        }
        let lin = |fan_in: usize, fan_out: usize, rng: &mut R| {
            Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
        };
        for l in 0..config.layers {
            let names = layer_names(l, config.heads);
            let mut it = names.into_iter();
            for _ in 0..config.heads {
                for _ in 0..3 {
                    store.register(it.next().unwrap(), lin(d, dh, rng))?;
                }
            }
            store.register(it.next().unwrap(), lin(d, d, rng))?;
            store.register(it.next().unwrap(), lin(d, dff, rng))?;
            store.register(it.next().unwrap(), Tensor::zeros(&[dff]))?;
            store.register(it.next().unwrap(), lin(dff, d, rng))?;
            store.register(it.next().unwrap(), Tensor::zeros(&[d]))?;
            store.register(it.next().unwrap(), Tensor::filled(&[d], 1.0))?;
            store.register(it.next().unwrap(), Tensor::zeros(&[d]))?;
            store.register(it.next().unwrap(), Tensor::filled(&[d], 1.0))?;
            store.register(it.next().unwrap(), Tensor::zeros(&[d]))?;
        }
        Self::from_store(config, store)
    }

    /// Re-resolves parameter handles by name, e.g. after loading a checkpoint.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let need = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let item_emb = need("item_emb")?;
        let pos_emb = if config.uses_positional() {
            Some(need("pos_emb")?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let names = layer_names(l, config.heads);
            let ids = names.iter().map(|n| need(n)).collect::<Result<Vec<_>>>()?;
            let h3 = 3 * config.heads;
            layers.push(LayerParams {
                wq: (0..config.heads).map(|h| ids[3 * h]).collect(),
                wk: (0..config.heads).map(|h| ids[3 * h + 1]).collect(),
                wv: (0..config.heads).map(|h| ids[3 * h + 2]).collect(),
                wo: ids[h3],
                ffn_w1: ids[h3 + 1],
                ffn_b1: ids[h3 + 2],
                ffn_w2: ids[h3 + 3],
                ffn_b2: ids[h3 + 4],
                ln1_gain: ids[h3 + 5],
                ln1_bias: ids[h3 + 6],
                ln2_gain: ids[h3 + 7],
                ln2_bias: ids[h3 + 8],
            });
        }
        let model = Self {
            config,
            store,
            item_emb,
            pos_emb,
            layers,
        };
        let d = model.config.d;
        if model.store.value(item_emb).cols() != d {
            return Err(Error::Checkpoint("item embedding width does not match d".into()));
        }
        Ok(model)
    }

    pub fn n_item_rows(&self) -> usize {
        self.store.value(self.item_emb).rows()
    }

    /// Grows the embedding table to at least `n_items` rows; new rows are
    /// freshly initialized, existing rows are kept.
    pub fn grow_items<R: Rng + ?Sized>(&mut self, n_items: usize, rng: &mut R) -> Result<usize> {
        let have = self.n_item_rows();
        if n_items <= have {
            return Ok(0);
        }
        let extra = Tensor::randn(&[n_items - have, self.config.d], EMBEDDING_STD, rng);
        self.store.grow_rows(self.item_emb, &extra)?;
        Ok(n_items - have)
    }

    pub fn embeddings(&self) -> &Tensor {
        self.store.value(self.item_emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d: 10,
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn from_store_recovers_same_handles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModelParameters::new(ModelConfig::default(), 7, &mut rng).unwrap();
        let again = ModelParameters::from_store(m.config.clone(), m.store.clone()).unwrap();
        assert_eq!(again.layers, m.layers);
        assert_eq!(again.item_emb, m.item_emb);
    }

    #[test]
    fn growth_keeps_existing_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelParameters::new(ModelConfig::default(), 3, &mut rng).unwrap();
        let before = m.embeddings().row(2).to_vec();
        assert_eq!(m.grow_items(5, &mut rng).unwrap(), 2);
        assert_eq!(m.n_item_rows(), 5);
        assert_eq!(m.embeddings().row(2), &before[..]);
        assert_eq!(m.grow_items(4, &mut rng).unwrap(), 0);
    }
}
