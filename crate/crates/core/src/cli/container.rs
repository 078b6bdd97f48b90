//! Binary model container.
//!
//! Layout: `b"TGFG"`, format version as u32 LE, manifest length as u64 LE,
//! the UTF-8 JSON manifest, then the payload of little-endian f64 blocks.
//! Manifest offsets are byte offsets into the payload, in manifest order,
//! contiguous from zero.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::numgrad::Tensor;

pub const MAGIC: &[u8; 4] = b"TGFG";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic: expected TGFG")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    BadVersion { found: u32 },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("entry `{name}`: {reason}")]
    BadEntry { name: String, reason: String },
}

/// A `(key, key, weight)` table such as CRF state weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTable {
    pub name: String,
    pub keys: Vec<(String, String)>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub kind: String,
    /// Hyperparameters and vocabularies, stored verbatim.
    pub config: Value,
    pub tensors: Vec<(String, Tensor)>,
    pub sparse: Vec<SparseTable>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct SparseEntry {
    name: String,
    keys: Vec<(String, String)>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: Value,
    tensors: Vec<TensorEntry>,
    sparse: Vec<SparseEntry>,
    payload_bytes: u64,
}

impl ModelContainer {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn sparse_table(&self, name: &str) -> Option<&SparseTable> {
        self.sparse.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            put_f64s(&mut payload, t.data());
        }
        let mut sparse = Vec::with_capacity(self.sparse.len());
        for s in &self.sparse {
            if s.keys.len() != s.values.len() {
                return Err(ContainerError::BadEntry {
                    name: s.name.clone(),
                    reason: format!("{} keys for {} values", s.keys.len(), s.values.len()),
                });
            }
            sparse.push(SparseEntry {
                name: s.name.clone(),
                keys: s.keys.clone(),
                offset: payload.len() as u64,
            });
            put_f64s(&mut payload, &s.values);
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
            sparse,
            payload_bytes: payload.len() as u64,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| ContainerError::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 4 {
            return Err(ContainerError::Truncated("missing header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(ContainerError::Truncated("missing header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ContainerError::BadVersion { found: version });
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[HEADER..];
        let mlen = usize::try_from(mlen)
            .ok()
            .filter(|&m| m <= body.len())
            .ok_or_else(|| ContainerError::Truncated(format!("manifest of {mlen} bytes exceeds the file")))?;
        let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| ContainerError::Manifest(e.to_string()))?;
        let payload = &body[mlen..];
        if (payload.len() as u64) < manifest.payload_bytes {
            return Err(ContainerError::Truncated(format!(
                "payload has {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(ContainerError::Manifest(format!(
                "{} trailing bytes after the payload",
                payload.len() as u64 - manifest.payload_bytes
            )));
        }

        // entries must tile the payload exactly, in manifest order
        let mut cursor = 0u64;
        let mut take = |name: &str, offset: u64, count: usize| -> Result<Vec<f64>, ContainerError> {
            if offset != cursor {
                return Err(ContainerError::BadEntry {
                    name: name.to_string(),
                    reason: format!("offset {offset}, expected {cursor}"),
                });
            }
            let end = count
                .checked_mul(8)
                .and_then(|b| cursor.checked_add(b as u64))
                .filter(|&e| e <= manifest.payload_bytes)
                .ok_or_else(|| ContainerError::BadEntry {
                    name: name.to_string(),
                    reason: format!("{count} values overrun the payload"),
                })?;
            let values = get_f64s(&payload[cursor as usize..end as usize]);
            cursor = end;
            Ok(values)
        };
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ContainerError::BadEntry {
                    name: e.name.clone(),
                    reason: "shape overflows".into(),
                })?;
            let data = take(&e.name, e.offset, count)?;
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| ContainerError::BadEntry {
                name: e.name.clone(),
                reason: err.to_string(),
            })?;
            tensors.push((e.name.clone(), t));
        }
        let mut sparse = Vec::with_capacity(manifest.sparse.len());
        for e in &manifest.sparse {
            let values = take(&e.name, e.offset, e.keys.len())?;
            sparse.push(SparseTable {
                name: e.name.clone(),
                keys: e.keys.clone(),
                values,
            });
        }
        if cursor != manifest.payload_bytes {
            return Err(ContainerError::Manifest(format!(
                "entries cover {cursor} of {} payload bytes",
                manifest.payload_bytes
            )));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            tensors,
            sparse,
        })
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelContainer) -> Result<(), ContainerError> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()?).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelContainer, ContainerError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelContainer::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelContainer {
        ModelContainer {
            kind: "crf".into(),
            config: serde_json::json!({"l2": 0.1, "labels": ["O", "B-geo"]}),
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap(),
                ),
                ("b".into(), Tensor::new(vec![0], vec![]).unwrap()),
            ],
            sparse: vec![SparseTable {
                name: "state".into(),
                keys: vec![("bias".into(), "O".into()), ("word=x".into(), "B-geo".into())],
                values: vec![0.25, -1.0 / 3.0],
            }],
        }
    }

    fn manifest_of(bytes: &[u8]) -> serde_json::Value {
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        serde_json::from_slice(&bytes[16..16 + mlen]).unwrap()
    }

    fn with_manifest(bytes: &[u8], m: &serde_json::Value) -> Vec<u8> {
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = serde_json::to_vec(m).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + mlen..]);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = ModelContainer::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
        let bits = |c: &ModelContainer| c.tensors[0].1.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TGFG");
        assert_eq!(bytes[4..8], [1, 0, 0, 0]);
        let m = manifest_of(&bytes);
        // shapes multiply to the element counts implied by the offsets
        assert_eq!(m["tensors"][1]["offset"], 48);
        assert_eq!(m["sparse"][0]["offset"], 48);
        assert_eq!(m["payload_bytes"], 64);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = ModelContainer::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, ContainerError::Truncated(_)), "{err}");
        assert!(matches!(
            ModelContainer::from_bytes(&bytes[..10]),
            Err(ContainerError::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(ModelContainer::from_bytes(&bytes), Err(ContainerError::BadMagic)));
        bytes[0] = b'T';
        bytes[4] = 9;
        assert!(matches!(
            ModelContainer::from_bytes(&bytes),
            Err(ContainerError::BadVersion { found: 9 })
        ));
    }

    #[test]
    fn overlapping_offsets_name_the_entry() {
        let bytes = sample().to_bytes().unwrap();
        let mut m = manifest_of(&bytes);
        m["sparse"][0]["offset"] = serde_json::json!(40);
        let err = ModelContainer::from_bytes(&with_manifest(&bytes, &m)).unwrap_err();
        match err {
            ContainerError::BadEntry { name, .. } => assert_eq!(name, "state"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn inflated_shape_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut m = manifest_of(&bytes);
        m["tensors"][0]["shape"] = serde_json::json!([2, 4]);
        assert!(matches!(
            ModelContainer::from_bytes(&with_manifest(&bytes, &m)),
            Err(ContainerError::BadEntry { .. })
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            rows in 0usize..4,
            cols in 0usize..4,
            seed in any::<u64>(),
        ) {
            let data: Vec<f64> = (0..rows * cols).map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x7fef_ffff_ffff_ffff)).collect();
            let m = ModelContainer {
                kind: "x".into(),
                config: serde_json::Value::Null,
                tensors: vec![("t".into(), Tensor::new(vec![rows, cols], data).unwrap())],
                sparse: vec![],
            };
            prop_assert_eq!(ModelContainer::from_bytes(&m.to_bytes().unwrap()).unwrap(), m);
        }
    }
}
