//! `CKPT` container: named float32 tensors with Adam state.
//!
//! Layout (little-endian): magic `CKPT`, `u32` version, `u32` metadata length
//! and that many bytes of UTF-8 JSON, `u32` entry count, then per entry:
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `u64` Adam step,
//! and three `f32` arrays of the tensor's size (values, first moment, second
//! moment).

use std::fs;
use std::path::Path;

use super::adam::{AdamState, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io_util::{push_f32s, read_f32s, read_u32, read_u64, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(meta: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.params.len() as u32).to_le_bytes());
    for (name, t) in &store.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let zero;
        let state = match store.adam.get(name) {
            Some(s) => s,
            None => {
                zero = AdamState::zeros(t.len());
                &zero
            }
        };
        out.extend_from_slice(&state.step.to_le_bytes());
        push_f32s(&mut out, t.data());
        push_f32s(&mut out, &state.m);
        push_f32s(&mut out, &state.v);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let truncated = || Error::Parse("checkpoint truncated".into());
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Parse("missing CKPT magic".into()));
    }
    let mut off = 4;
    let version = read_u32(bytes, &mut off).ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = read_u32(bytes, &mut off).ok_or_else(truncated)? as usize;
    let meta = bytes.get(off..off + meta_len).ok_or_else(truncated)?;
    let meta = String::from_utf8(meta.to_vec())
        .map_err(|_| Error::Parse("checkpoint metadata is not UTF-8".into()))?;
    off += meta_len;
    let entries = read_u32(bytes, &mut off).ok_or_else(truncated)?;
    let mut store = ParamStore::default();
    for _ in 0..entries {
        let name_len = read_u32(bytes, &mut off).ok_or_else(truncated)? as usize;
        let name = bytes.get(off..off + name_len).ok_or_else(truncated)?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
        off += name_len;
        let rank = read_u32(bytes, &mut off).ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(bytes, &mut off).map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let n: usize = shape.iter().product();
        let step = read_u64(bytes, &mut off).ok_or_else(truncated)?;
        let values = read_f32s(bytes, &mut off, n).ok_or_else(truncated)?;
        let m = read_f32s(bytes, &mut off, n).ok_or_else(truncated)?;
        let v = read_f32s(bytes, &mut off, n).ok_or_else(truncated)?;
        store.params.insert(name.clone(), Tensor::new(shape, values)?);
        store.adam.insert(name, AdamState { m, v, step });
    }
    if off != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint entries".into()));
    }
    Ok((meta, store))
}

pub fn write_checkpoint(path: &Path, meta: &str, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(meta, store))
}

pub fn read_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40), step in 0u64..1000) {
            let mut store = ParamStore::default();
            let n = values.len();
            store.insert("a.weight", Tensor::new(vec![n], values.clone()).unwrap());
            store.insert("b", Tensor::new(vec![1, n], values.iter().map(|v| -v).collect()).unwrap());
            let st = store.adam.get_mut("a.weight").unwrap();
            st.step = step;
            st.m = values.iter().map(|v| v * 0.5).collect();
            let bytes = encode_checkpoint("{\"x\":1}", &store);
            let (meta, back) = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(meta, "{\"x\":1}");
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_checkpoint("{}", &ParamStore::default());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
