//! Binary checkpoint format.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the raw little-endian `f64` payload of every tensor in header order.
//! Offsets in the header are byte offsets into the payload section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (model configuration, installed adapters).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode<S: Scalar>(store: &ParamStore<S>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
        });
        offset += 8 * p.value.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        tensors,
        meta,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<S: Scalar>(
    bytes: &[u8],
    origin: &Path,
) -> Result<(ParamStore<S>, serde_json::Value)> {
    let corrupt = |msg: &str| Error::Corrupt {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 {
        return Err(corrupt("missing header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(&format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut expected_end = 0usize;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(corrupt(&format!("payload for {} is truncated", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.insert(
            e.name.clone(),
            Tensor::new(e.shape.clone(), data)?,
            e.trainable,
        )?;
        expected_end = expected_end.max(end);
    }
    if expected_end != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok((store, header.meta))
}

pub fn save<S: Scalar>(path: &Path, store: &ParamStore<S>, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(store, meta)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut store = ParamStore::new();
            let n = vals.len();
            store.insert("a", Tensor::new(vec![n], vals.clone()).unwrap(), true).unwrap();
            store.insert("adapter.b", Tensor::new(vec![1, n], vals.iter().rev().copied().collect()).unwrap(), false).unwrap();
            let bytes = encode(&store, serde_json::json!({"k": 1})).unwrap();
            let (back, meta) = decode::<f64>(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(meta["k"].as_i64(), Some(1));
            for ((na, pa), (nb, pb)) in store.iter().zip(back.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(pa.trainable, pb.trainable);
                let bits_a: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros(&[4, 4]), true).unwrap();
        let bytes = encode(&store, serde_json::Value::Null).unwrap();
        let err = decode::<f64>(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
    }
}
