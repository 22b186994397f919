use std::collections::{BTreeMap, BTreeSet};

use super::memory::MemoryPair;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

/// Memories of one user for every (layer, head), indexed `layer * heads + head`.
#[derive(Clone, Debug, PartialEq)]
pub struct UserMemory {
    pub pairs: Vec<MemoryPair>,
    /// Synthesized from neighbors, not yet backed by the user's own data.
    pub pseudo: bool,
    /// Block whose data was last absorbed; 0 for pseudo entries of users
    /// without any block yet.
    pub stamp: usize,
}

/// Per-user historical memories `s^{t-1}, z^{t-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct UserMemoryStore {
    pub layers: usize,
    pub heads: usize,
    pub dh: usize,
    /// Last block committed into the store.
    block: usize,
    entries: BTreeMap<usize, UserMemory>,
    updated: BTreeSet<usize>,
}

const MAGIC: &[u8; 8] = b"SRMEMORY";
const VERSION: u32 = 1;

impl UserMemoryStore {
    pub fn new(layers: usize, heads: usize, dh: usize) -> Self {
        Self {
            layers,
            heads,
            dh,
            block: 0,
            entries: BTreeMap::new(),
            updated: BTreeSet::new(),
        }
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user: usize) -> Option<&UserMemory> {
        self.entries.get(&user)
    }

    pub fn pair(&self, user: usize, layer: usize, head: usize) -> Option<&MemoryPair> {
        self.entries
            .get(&user)
            .map(|m| &m.pairs[layer * self.heads + head])
    }

    pub fn users(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn has_genuine(&self, user: usize) -> bool {
        self.entries.get(&user).is_some_and(|m| !m.pseudo)
    }

    fn check_pairs(&self, pairs: &[MemoryPair]) -> Result<()> {
        if pairs.len() != self.layers * self.heads
            || pairs.iter().any(|p| p.dk != self.dh || p.dv != self.dh)
        {
            return Err(Error::dim(
                "memory store",
                format!("expected {} pairs of {}x{}", self.layers * self.heads, self.dh, self.dh),
            ));
        }
        if pairs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "memory store" });
        }
        Ok(())
    }

    /// Installs or replaces pseudo-historical memories for a user without
    /// genuine memories.
    pub fn set_pseudo(&mut self, user: usize, pairs: Vec<MemoryPair>) -> Result<()> {
        self.check_pairs(&pairs)?;
        if self.has_genuine(user) {
            return Err(Error::Consistency(format!(
                "user {user} already has genuine memories"
            )));
        }
        self.entries.insert(
            user,
            UserMemory {
                pairs,
                pseudo: true,
                stamp: 0,
            },
        );
        Ok(())
    }

    pub fn clear_pseudo(&mut self) {
        self.entries.retain(|_, m| !m.pseudo);
    }

    /// Adds a user's within-block memories for block `block` onto the
    /// stored ones (pseudo entries included) and marks them genuine.
    pub fn update_historical(&mut self, user: usize, block: usize, current: &[MemoryPair]) -> Result<()> {
        self.check_pairs(current)?;
        if block != self.block + 1 {
            return Err(Error::Usage(format!(
                "memory update for block {block} but store holds block {}",
                self.block
            )));
        }
        if !self.updated.insert(user) {
            return Err(Error::Usage(format!(
                "memories of user {user} updated twice in block {block}"
            )));
        }
        let n = self.layers * self.heads;
        let entry = self.entries.entry(user).or_insert_with(|| UserMemory {
            pairs: vec![MemoryPair::zeros(self.dh, self.dh); n],
            pseudo: false,
            stamp: 0,
        });
        for (m, c) in entry.pairs.iter_mut().zip(current) {
            m.add_assign(c)?;
        }
        entry.pseudo = false;
        entry.stamp = block;
        Ok(())
    }

    /// Closes block `block`: remaining pseudo entries are dropped and the
    /// store stamp advances.
    pub fn commit_block(&mut self, block: usize) -> Result<()> {
        if block != self.block + 1 {
            return Err(Error::Usage(format!(
                "commit of block {block} but store holds block {}",
                self.block
            )));
        }
        self.clear_pseudo();
        self.updated.clear();
        self.block = block;
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.layers);
        w.usize(self.heads);
        w.usize(self.dh);
        w.usize(self.block);
        w.usizes(&self.updated.iter().copied().collect::<Vec<_>>());
        w.usize(self.entries.len());
        for (&user, m) in &self.entries {
            w.usize(user);
            w.bool(m.pseudo);
            w.usize(m.stamp);
            for p in &m.pairs {
                w.f64s(&p.s);
                w.f64s(&p.z);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let layers = r.usize()?;
        let heads = r.usize()?;
        let dh = r.usize()?;
        let mut store = Self::new(layers, heads, dh);
        store.block = r.usize()?;
        store.updated = r.usizes()?.into_iter().collect();
        let n = r.usize()?;
        for _ in 0..n {
            let user = r.usize()?;
            let pseudo = r.bool()?;
            let stamp = r.usize()?;
            let mut pairs = Vec::with_capacity(layers * heads);
            for _ in 0..layers * heads {
                let s = r.f64s()?;
                let z = r.f64s()?;
                if s.len() != dh * dh || z.len() != dh {
                    return Err(Error::Checkpoint("memory pair size mismatch".into()));
                }
                pairs.push(MemoryPair { dk: dh, dv: dh, s, z });
            }
            store.entries.insert(user, UserMemory { pairs, pseudo, stamp });
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MAGIC, VERSION);
        self.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "memory store")?;
        let s = Self::read(&mut r)?;
        r.finish()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csa::acquire_current;

    fn pairs(x: f64) -> Vec<MemoryPair> {
        vec![acquire_current(&[x, -x], &[1.0, x], 2, 2, 1); 2]
    }

    #[test]
    fn first_update_equals_current_and_double_update_fails() {
        let mut st = UserMemoryStore::new(1, 2, 2);
        st.update_historical(3, 1, &pairs(0.5)).unwrap();
        assert_eq!(st.get(3).unwrap().pairs, pairs(0.5));
        assert!(matches!(st.update_historical(3, 1, &pairs(0.5)), Err(Error::Usage(_))));
        st.commit_block(1).unwrap();
        st.update_historical(3, 2, &pairs(0.5)).unwrap();
        assert_eq!(st.get(3).unwrap().stamp, 2);
    }

    #[test]
    fn pseudo_is_replaced_then_absorbed() {
        let mut st = UserMemoryStore::new(1, 2, 2);
        st.update_historical(0, 1, &pairs(1.0)).unwrap();
        st.commit_block(1).unwrap();
        st.set_pseudo(9, pairs(2.0)).unwrap();
        st.set_pseudo(9, pairs(1.0)).unwrap();
        assert!(st.get(9).unwrap().pseudo);
        assert!(matches!(st.set_pseudo(0, pairs(1.0)), Err(Error::Consistency(_))));
        st.update_historical(9, 2, &pairs(1.0)).unwrap();
        let m = st.get(9).unwrap();
        assert!(!m.pseudo);
        assert_eq!(m.pairs[0].z[0], 2.0 * pairs(1.0)[0].z[0]);
    }

    #[test]
    fn pseudo_without_update_is_dropped_at_commit() {
        let mut st = UserMemoryStore::new(1, 2, 2);
        st.set_pseudo(4, pairs(1.0)).unwrap();
        st.commit_block(1).unwrap();
        assert!(st.get(4).is_none());
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let mut st = UserMemoryStore::new(1, 2, 2);
        st.update_historical(1, 1, &pairs(0.3)).unwrap();
        st.set_pseudo(2, pairs(0.7)).unwrap();
        let bytes = st.to_bytes();
        let back = UserMemoryStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(UserMemoryStore::from_bytes(&bad).is_err());
    }
}
