use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter};

use crate::error::{Error, Result};

pub type ParamTensor = ArrayD<f64>;

/// Named parameter tensors, keyed `"<layer>/<param>"` (Keras naming, e.g.
/// `block1_conv1/kernel`). Stored on disk as a NumPy `.npz` archive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: ParamTensor) {
        self.tensors.insert(key.into(), tensor);
    }

    pub fn get(&self, key: &str) -> Option<&ParamTensor> {
        self.tensors.get(key)
    }

    pub fn require(&self, key: &str, shape: &[usize]) -> Result<&ParamTensor> {
        let t = self
            .tensors
            .get(key)
            .ok_or_else(|| Error::Shape(format!("missing parameter {key}")))?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "parameter {key} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn save_npz(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut npz = NpzWriter::new_compressed(BufWriter::new(file));
        for (key, t) in &self.tensors {
            npz.add_array(format!("{key}.npy"), t)
                .map_err(|e| Error::format(path, e))?;
        }
        npz.finish().map_err(|e| Error::format(path, e))?;
        Ok(())
    }

    /// Loads an `.npz` archive of float32 or float64 arrays.
    pub fn load_npz(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut npz = NpzReader::new(BufReader::new(file)).map_err(|e| Error::format(path, e))?;
        let names = npz.names().map_err(|e| Error::format(path, e))?;
        let mut store = Self::new();
        for (i, name) in names.iter().enumerate() {
            let tensor: ArrayD<f64> = match npz.by_index::<ndarray::OwnedRepr<f64>, IxDyn>(i) {
                Ok(t) => t,
                Err(_) => npz
                    .by_index::<ndarray::OwnedRepr<f32>, IxDyn>(i)
                    .map_err(|e| Error::format(path, format!("{name}: {e}")))?
                    .mapv(f64::from),
            };
            let key = name.strip_suffix(".npy").unwrap_or(name);
            store.insert(key, tensor);
        }
        Ok(store)
    }
}
