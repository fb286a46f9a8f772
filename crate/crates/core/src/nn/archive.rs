//! Flat `name -> tensor` weight archive.
//!
//! The layout is the safetensors container: an 8-byte little-endian header
//! length, a JSON header mapping each name to `{dtype, shape, data_offsets}`,
//! then the raw little-endian tensor bytes. `f32` stores are written as `F32`;
//! `F32` and `F64` are accepted on read. Tensors keep their store order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::util::atomic_write;

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn to_bytes<F: Scalar>(store: &ParamStore<F>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let wide = std::mem::size_of::<F>() == 8;
    let width = if wide { 8 } else { 4 };
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), serde_json::to_value(metadata).expect("strings"));
    }
    let mut data = Vec::new();
    for (name, t) in store.iter() {
        let begin = data.len();
        for v in t.iter() {
            let x = v.to_f64().unwrap_or(f64::NAN);
            if wide {
                data.extend_from_slice(&x.to_le_bytes());
            } else {
                data.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        debug_assert_eq!(data.len() - begin, t.len() * width);
        let entry = Entry {
            dtype: if wide { "F64" } else { "F32" }.into(),
            shape: t.shape().to_vec(),
            data_offsets: [begin, data.len()],
        };
        header.insert(name.to_string(), serde_json::to_value(entry).expect("plain struct"));
    }
    let mut json = serde_json::to_vec(&header).expect("json");
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> std::result::Result<(ParamStore<F>, BTreeMap<String, String>), String> {
    if bytes.len() < 8 {
        return Err("truncated header length".into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + n).ok_or("truncated header")?;
    let data = &bytes[8 + n..];
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
    let mut metadata = BTreeMap::new();
    let mut entries = Vec::new();
    for (name, value) in header {
        if name == "__metadata__" {
            metadata = serde_json::from_value(value).map_err(|e| format!("bad metadata: {e}"))?;
            continue;
        }
        let entry: Entry = serde_json::from_value(value).map_err(|e| format!("{name}: {e}"))?;
        entries.push((name, entry));
    }
    entries.sort_by_key(|(_, e)| e.data_offsets[0]);
    let mut store = ParamStore::new();
    for (name, e) in entries {
        let width = match e.dtype.as_str() {
            "F32" => 4,
            "F64" => 8,
            other => return Err(format!("{name}: unsupported dtype {other}")),
        };
        let count: usize = e.shape.iter().product();
        let [begin, end] = e.data_offsets;
        if end < begin || end - begin != count * width {
            return Err(format!("{name}: data size does not match shape {:?}", e.shape));
        }
        let raw = data.get(begin..end).ok_or_else(|| format!("{name}: data out of range"))?;
        let values: Vec<F> = raw
            .chunks_exact(width)
            .map(|c| {
                let x = if width == 4 {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                };
                F::of(x)
            })
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|e| e.to_string())?;
        store.add(name, t);
    }
    Ok((store, metadata))
}

pub fn write<F: Scalar>(path: &Path, store: &ParamStore<F>, metadata: &BTreeMap<String, String>) -> Result<()> {
    atomic_write(path, &to_bytes(store, metadata))
}

pub fn read<F: Scalar>(path: &Path) -> Result<ParamStore<F>> {
    read_with_metadata(path).map(|(s, _)| s)
}

pub fn read_with_metadata<F: Scalar>(path: &Path) -> Result<(ParamStore<F>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_preserves_order_shapes_and_values() {
        let mut store = ParamStore::<f32>::new();
        store.add("encoder.conv1.weight", ArrayD::from_shape_fn(vec![2, 3, 1, 1], |i| i[1] as f32 * 0.5 - 1.0));
        store.add("attention.gamma", ArrayD::from_elem(vec![1], 0.25f32));
        store.add("a.bias", ArrayD::zeros(vec![4]));
        let meta = BTreeMap::from([("format".to_string(), "pt".to_string())]);
        let bytes = to_bytes(&store, &meta);
        let (back, m) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(m, meta);
        // Header length prefix is 8-byte aligned.
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn rejects_size_mismatch() {
        let header = br#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(from_bytes::<f32>(&bytes).is_err());
    }
}
