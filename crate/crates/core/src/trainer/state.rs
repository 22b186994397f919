use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::backbone::ModelParameters;
use crate::binio::{Reader, Writer};
use crate::cie::{InterestPool, InterestPools, PoolKind};
use crate::csa::UserMemoryStore;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{read_params, write_params};
use crate::numerics::{Adam, AdamConfig};

/// Everything a stream run carries from one block to the next.
#[derive(Clone, Debug)]
pub struct StreamState {
    /// Last block whose training has been committed; 0 before the stream.
    pub block: usize,
    pub config: TrainConfig,
    pub model: ModelParameters,
    pub pools: InterestPools,
    pub adam: Adam,
    pub memories: UserMemoryStore,
    /// Latest (historical, current) pool match of every user.
    pub indices: BTreeMap<usize, (usize, usize)>,
    pub rng: ChaCha8Rng,
}

const MAGIC: &[u8; 8] = b"SRSTATE\0";
const VERSION: u32 = 1;

impl StreamState {
    pub fn new(config: &TrainConfig, n_items: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ModelParameters::new(config.model.clone(), n_items, &mut rng)?;
        let d = config.model.d;
        let p = config.pools;
        let historical = InterestPool::register(
            &mut model.store,
            PoolKind::Historical,
            p.historical_size,
            p.historical_len,
            d,
            &mut rng,
        )?;
        let current = InterestPool::register(
            &mut model.store,
            PoolKind::Current,
            p.current_size,
            p.current_len,
            d,
            &mut rng,
        )?;
        let m = &config.model;
        Ok(Self {
            block: 0,
            config: config.clone(),
            model,
            pools: InterestPools { historical, current },
            adam: Adam::new(config.adam()),
            memories: UserMemoryStore::new(m.layers, m.heads, m.head_dim()),
            indices: BTreeMap::new(),
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(MAGIC, VERSION);
        w.usize(self.block);
        w.str(&serde_json::to_string(&self.config)?);
        write_params(&mut w, &self.model.store);
        let a = self.adam.config;
        for x in [a.lr, a.beta1, a.beta2, a.eps] {
            w.f64(x);
        }
        w.u64(self.adam.step_count());
        let (m, v) = self.adam.moments();
        w.usize(m.len());
        for (mi, vi) in m.iter().zip(v) {
            w.f64s(mi);
            w.f64s(vi);
        }
        self.memories.write(&mut w);
        w.usize(self.indices.len());
        for (&u, &(i, j)) in &self.indices {
            w.usize(u);
            w.usize(i);
            w.usize(j);
        }
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        let pos = self.rng.get_word_pos();
        w.u64(pos as u64);
        w.u64((pos >> 64) as u64);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "stream state")?;
        let block = r.usize()?;
        let config: TrainConfig = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Checkpoint(format!("stream state config: {e}")))?;
        let store = read_params(&mut r)?;
        let model = ModelParameters::from_store(config.model.clone(), store)?;
        let pools = InterestPools {
            historical: InterestPool::from_store(
                &model.store,
                PoolKind::Historical,
                config.pools.historical_len,
            )?,
            current: InterestPool::from_store(&model.store, PoolKind::Current, config.pools.current_len)?,
        };
        let adam_cfg = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let n = r.usize()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            m.push(r.f64s()?);
            v.push(r.f64s()?);
        }
        let memories = UserMemoryStore::read(&mut r)?;
        let n_idx = r.usize()?;
        let mut indices = BTreeMap::new();
        for _ in 0..n_idx {
            let u = r.usize()?;
            indices.insert(u, (r.usize()?, r.usize()?));
        }
        let seed: [u8; 32] = r
            .bytes()?
            .try_into()
            .map_err(|_| Error::Checkpoint("stream state: bad rng seed".into()))?;
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        r.finish()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(lo | (hi << 64));
        Ok(Self {
            block,
            config,
            model,
            pools,
            adam: Adam::from_parts(adam_cfg, step, m, v),
            memories,
            indices,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
