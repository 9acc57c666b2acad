//! Named parameter tensors and their on-disk form: a flat little-endian f32
//! blob plus a JSON sidecar listing names, shapes and offsets.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array2<f64>,
    trainable: bool,
}

/// Ordered collection of named matrices. Non-trainable entries hold frozen
/// weights or running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    /// Free-form description of the architecture the tensors belong to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

const FORMAT: &str = "rcm-weights/1";

/// Gaussian matrix with standard deviation `std`.
pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Id of a parameter the architecture is known to have.
    pub fn id(&self, name: &str) -> ParamId {
        self.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Serializes to `(blob, sidecar_json)`.
    pub fn to_bytes(&self) -> (Vec<u8>, String) {
        self.to_bytes_with_meta(None)
    }

    pub fn to_bytes_with_meta(&self, meta: Option<serde_json::Value>) -> (Vec<u8>, String) {
        let mut blob = Vec::with_capacity(4 * self.num_values());
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            let (r, c) = e.value.dim();
            tensors.push(TensorRecord { name: e.name.clone(), shape: [r, c], offset, trainable: e.trainable });
            for v in e.value.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            offset += r * c;
        }
        let sidecar = Sidecar { format: FORMAT.to_string(), meta, tensors };
        (blob, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))
    }

    pub fn from_bytes(blob: &[u8], sidecar: &str) -> Result<Self> {
        Ok(Self::from_bytes_with_meta(blob, sidecar)?.0)
    }

    pub fn from_bytes_with_meta(blob: &[u8], sidecar: &str) -> Result<(Self, Option<serde_json::Value>)> {
        let sidecar: Sidecar = serde_json::from_str(sidecar)?;
        if sidecar.format != FORMAT {
            return Err(Error::Format(format!("unsupported weight format {:?}", sidecar.format)));
        }
        if blob.len() % 4 != 0 {
            return Err(Error::Format("weight blob length is not a multiple of 4".into()));
        }
        let floats: Vec<f64> =
            blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let mut store = ParamStore::new();
        for t in sidecar.tensors {
            let n = t.shape[0] * t.shape[1];
            let slice = floats
                .get(t.offset..t.offset + n)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the blob", t.name)))?;
            let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), slice.to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            store.add(&t.name, value, t.trainable);
        }
        Ok((store, sidecar.meta))
    }

    pub fn save(&self, blob_path: &Path, sidecar_path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        let (blob, sidecar) = self.to_bytes_with_meta(meta);
        std::fs::write(blob_path, blob)?;
        std::fs::write(sidecar_path, sidecar)?;
        Ok(())
    }

    pub fn load(blob_path: &Path, sidecar_path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        Self::from_bytes_with_meta(&std::fs::read(blob_path)?, &std::fs::read_to_string(sidecar_path)?)
    }

    /// Copies values from `other` into matching entries, requiring identical
    /// names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "weight file has {} tensors, architecture expects {}",
                other.len(),
                self.len()
            )));
        }
        for e in &mut self.entries {
            let id = other
                .get(&e.name)
                .ok_or_else(|| Error::Shape(format!("weight file lacks tensor {}", e.name)))?;
            let v = other.value(id);
            if v.dim() != e.value.dim() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?} in the file, architecture expects {:?}",
                    e.name,
                    v.dim(),
                    e.value.dim()
                )));
            }
            e.value.assign(v);
        }
        Ok(())
    }

    /// Rounds every value through f32, matching what a save/load cycle produces.
    pub fn quantize_f32(&mut self) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_through_bytes() {
        let mut s = ParamStore::new();
        s.add("a.w", array![[1.0, 2.5], [-3.0, 0.125]], true);
        s.add("b.stats", array![[7.0, 8.0, 9.0]], false);
        let (blob, side) = s.to_bytes();
        assert_eq!(blob.len(), 4 * 7);
        let back = ParamStore::from_bytes(&blob, &side).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut a = ParamStore::new();
        a.add("w", Array2::zeros((2, 2)), true);
        let mut b = ParamStore::new();
        b.add("w", Array2::zeros((2, 3)), true);
        assert!(matches!(a.load_values_from(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Array2::ones((3, 3)), true);
        let (blob, side) = s.to_bytes();
        assert!(ParamStore::from_bytes(&blob[..8], &side).is_err());
    }
}
