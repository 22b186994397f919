//! Parameter checkpoint container.
//!
//! Layout (little-endian): magic `SRPARAMS`, `u32` version, `u64` count,
//! then per parameter in registration order: name (`u64` length + UTF-8
//! bytes), dims (`u64` count + `u64` each), values (`u64` count + `f64` each).

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SRPARAMS";
const VERSION: u32 = 1;

pub(crate) fn write_params(w: &mut Writer, store: &ParamStore) {
    w.usize(store.len());
    for (_, p) in store.iter() {
        w.str(&p.name);
        w.usizes(p.value.shape());
        w.f64s(p.value.data());
    }
}

pub(crate) fn read_params(r: &mut Reader<'_>) -> Result<ParamStore> {
    let n = r.usize()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let shape = r.usizes()?;
        let data = r.f64s()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store
            .register(name, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::with_header(MAGIC, VERSION);
    write_params(&mut w, store);
    w.finish()
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::open(bytes, MAGIC, VERSION, "parameter checkpoint")?;
    let store = read_params(&mut r)?;
    r.finish()?;
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(store))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    decode_params(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        store
            .register("a", Tensor::matrix(2, 2, vec![1.0, -0.0, 1e-300, f64::MAX]).unwrap())
            .unwrap();
        store.register("b", Tensor::scalar(0.1)).unwrap();
        let bytes = encode_params(&store);
        let back = decode_params(&bytes).unwrap();
        assert_eq!(encode_params(&back), bytes);
        assert_eq!(back.value(back.id("a").unwrap()), store.value(store.id("a").unwrap()));
    }

    #[test]
    fn corrupt_header_and_version_are_rejected() {
        let store = ParamStore::new();
        let mut bytes = encode_params(&store);
        bytes[8] = 9;
        assert!(matches!(decode_params(&bytes), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_params(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode_params(&bytes[..5]).is_err());
    }
}
