//! The TNSF binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 0..4         | magic `TNSF`                         |
//! | 4            | version, currently 1                 |
//! | 5            | dtype: 0 = f32, 1 = f64              |
//! | 6..8         | rank as u16                          |
//! | 8..8+8·rank  | extents as u64                       |
//! | rest         | row-major payload                    |
//!
//! Named tensor collections (model parameters) are stored as consecutive
//! TNSF records plus a JSON manifest naming each record in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TNSF";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + dtype.width() * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, Dtype, usize)> {
    let need = |what, expected: usize| {
        if bytes.len() < expected {
            Err(Error::Truncated {
                what,
                expected,
                actual: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need("header", 8)?;
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::BadDtype(other)),
    };
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 8 * rank;
    need("extents", header)?;
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::schema("extents", "element count overflows"))?;
    let payload = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::schema("extents", "payload size overflows"))?;
    if bytes.len() - header < payload {
        return Err(Error::Truncated {
            what: "payload",
            expected: payload,
            actual: bytes.len() - header,
        });
    }
    let body = &bytes[header..header + payload];
    let data: Vec<f64> = match dtype {
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype, header + payload))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, _, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::schema(
            "payload",
            format!("{} trailing bytes after record", bytes.len() - used),
        ));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(t, dtype))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u8,
    pub dtype: Dtype,
    pub tensors: Vec<ManifestEntry>,
    /// Free-form description of the model the tensors belong to.
    #[serde(default)]
    pub model: serde_json::Value,
}

/// Writes `<stem>.tnsf` (concatenated records) and `<stem>.json` (manifest).
pub fn write_named(
    dir: &Path,
    stem: &str,
    tensors: &[(String, Tensor)],
    model: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let rec = encode(t, Dtype::F64);
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            bytes: rec.len() as u64,
        });
        blob.extend_from_slice(&rec);
    }
    let manifest = Manifest {
        format: "TNSF".into(),
        version: VERSION,
        dtype: Dtype::F64,
        tensors: entries,
        model,
    };
    fs::File::create(dir.join(format!("{stem}.tnsf")))?.write_all(&blob)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads a collection written by [`write_named`], checking every record
/// against its manifest entry.
pub fn read_named(dir: &Path, stem: &str) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let blob = fs::read(dir.join(format!("{stem}.tnsf")))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for (i, e) in manifest.tensors.iter().enumerate() {
        let start = e.offset as usize;
        let end = start + e.bytes as usize;
        if end > blob.len() {
            return Err(Error::Truncated {
                what: "payload",
                expected: end,
                actual: blob.len(),
            });
        }
        let t = decode(&blob[start..end])?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::schema(
                format!("tensors[{i}].shape"),
                format!("manifest says {:?}, record has {:?}", e.shape, t.shape()),
            ));
        }
        out.push((e.name.clone(), t));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t, Dtype::F64);
        assert_eq!(&b[0..4], b"TNSF");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &3u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 24 + 48);
    }

    #[test]
    fn malformed_inputs() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode(&t, Dtype::F64);
        match decode(&b[..b.len() - 3]) {
            Err(Error::Truncated {
                what: "payload",
                expected,
                actual,
            }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 29);
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::BadVersion(2))));
        let mut bad = b.clone();
        bad[5] = 9;
        assert!(matches!(decode(&bad), Err(Error::BadDtype(9))));
        assert!(matches!(decode(&b[..5]), Err(Error::Truncated { what: "header", .. })));
    }

    #[test]
    fn f32_records_decode() {
        let t = Tensor::new(vec![2], vec![0.5, -1.25]).unwrap();
        assert_eq!(decode(&encode(&t, Dtype::F32)).unwrap(), t);
    }

    #[test]
    fn named_collection_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![
            ("a.w".to_string(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b".to_string(), Tensor::scalar(-0.125)),
        ];
        write_named(dir.path(), "params", &items, serde_json::json!({"kind": "test"})).unwrap();
        let (m, back) = read_named(dir.path(), "params").unwrap();
        assert_eq!(back, items);
        assert_eq!(m.model["kind"], "test");
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(&shape, 1e6, &mut rng);
            let back = decode(&encode(&t, Dtype::F64)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
