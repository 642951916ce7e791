//! Binary checkpoint container.
//!
//! Layout: `b"LFCK"`, format version as `u16` LE, header length as `u32` LE,
//! a JSON header, then little-endian `f32` blobs in the order the header
//! lists them. Every all-float array of the serialized state is moved out of
//! the JSON into a blob and replaced by `{"$blob": index}`; integers (RNG
//! words, counters, seeds) and scalar floats stay in the header.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const FORMAT_VERSION: u16 = 1;
const BLOB_KEY: &str = "$blob";

fn is_float_array(v: &[Value]) -> bool {
    !v.is_empty() && v.iter().all(|x| matches!(x, Value::Number(n) if n.is_f64()))
}

fn extract(v: Value, blobs: &mut Vec<Vec<f32>>) -> Value {
    match v {
        Value::Array(items) if is_float_array(&items) => {
            let data = items.iter().map(|x| x.as_f64().expect("float") as f32).collect();
            blobs.push(data);
            json!({ BLOB_KEY: blobs.len() - 1 })
        }
        Value::Array(items) => Value::Array(items.into_iter().map(|x| extract(x, blobs)).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, x)| (k, extract(x, blobs))).collect()),
        other => other,
    }
}

fn restore(v: Value, blobs: &[Vec<f32>]) -> Result<Value> {
    match v {
        Value::Object(map) if map.len() == 1 && map.contains_key(BLOB_KEY) => {
            let idx = map[BLOB_KEY].as_u64().ok_or_else(|| Error::Checkpoint("bad blob reference".into()))? as usize;
            let blob = blobs.get(idx).ok_or_else(|| Error::Checkpoint(format!("blob {idx} missing")))?;
            let items = blob
                .iter()
                .map(|&x| serde_json::Number::from_f64(x as f64).map(Value::Number))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Checkpoint("non-finite value in blob".into()))?;
            Ok(Value::Array(items))
        }
        Value::Array(items) => Ok(Value::Array(items.into_iter().map(|x| restore(x, blobs)).collect::<Result<_>>()?)),
        Value::Object(map) => {
            let mut out = Map::new();
            for (k, x) in map {
                out.insert(k, restore(x, blobs)?);
            }
            Ok(Value::Object(out))
        }
        other => Ok(other),
    }
}

/// Encodes `state` plus free-form `meta` fields into checkpoint bytes.
pub fn encode<T: Serialize>(state: &T, meta: Value) -> Result<Vec<u8>> {
    let value = serde_json::to_value(state)?;
    let mut blobs = Vec::new();
    let stripped = extract(value, &mut blobs);
    let header = json!({
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "blobs": blobs.iter().map(|b| b.len()).collect::<Vec<_>>(),
        "state": stripped,
    });
    let header = serde_json::to_vec(&header)?;
    let payload: usize = blobs.iter().map(|b| b.len() * 4).sum();
    let mut out = Vec::with_capacity(10 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?.to_le_bytes());
    out.extend_from_slice(&header);
    for b in &blobs {
        for x in b {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes into the state and its `meta` header field.
pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (magic mismatch)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let header_bytes = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let mut header: Value = serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let lens: Vec<usize> = serde_json::from_value(header["blobs"].take()).map_err(|e| Error::Checkpoint(format!("blob table: {e}")))?;
    let mut pos = 10 + hlen;
    let mut blobs = Vec::with_capacity(lens.len());
    for n in lens {
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated blob data"))?;
        blobs.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<f32>>());
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after blobs"));
    }
    let state = restore(header["state"].take(), &blobs)?;
    let state = serde_json::from_value(state).map_err(|e| Error::Checkpoint(format!("state: {e}")))?;
    Ok((state, header["meta"].take()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        name: String,
        count: u64,
        rate: f64,
        weights: Vec<f64>,
        nested: Vec<Vec<f64>>,
        words: Vec<u32>,
    }

    fn demo() -> Demo {
        Demo {
            name: "x".into(),
            count: 7,
            rate: 2e-4,
            weights: vec![0.5, -1.25, 3.0],
            nested: vec![vec![1.0], vec![0.1]],
            words: vec![1, 2, 3],
        }
    }

    #[test]
    fn round_trip_quantizes_arrays_only() {
        let bytes = encode(&demo(), json!({"iteration": 3})).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let (back, meta): (Demo, Value) = decode(&bytes).unwrap();
        assert_eq!(meta["iteration"], 3);
        assert_eq!(back.rate, 2e-4);
        assert_eq!(back.words, vec![1, 2, 3]);
        assert_eq!(back.weights, vec![0.5, -1.25, 3.0]);
        assert_eq!(back.nested[1][0], 0.1f32 as f64);
        assert_eq!(encode(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&demo(), Value::Null).unwrap();
        assert!(decode::<Demo>(b"NOPE").is_err());
        assert!(decode::<Demo>(&bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode::<Demo>(&v), Err(Error::Checkpoint(_))));
    }
}
