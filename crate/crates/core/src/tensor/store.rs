use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Named parameter tensors. Iteration order is the name order (BTreeMap),
/// which keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// JSON document mapping name -> {shape, values}, values row-major.
    /// serde_json prints the shortest round-tripping decimal form, so a
    /// save/load cycle reproduces every f64 bit-exactly.
    pub fn to_json(&self) -> Result<String> {
        let doc: BTreeMap<&String, StoredTensor> = self
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: BTreeMap<String, StoredTensor> = serde_json::from_str(json)?;
        let mut store = ParamStore::new();
        for (name, st) in doc {
            store.insert(name, Tensor::new(st.shape, st.values)?.with_grad());
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 2.0_f64.sqrt()])
                .unwrap()
                .with_grad(),
        );
        store.insert("b", Tensor::new(vec![1], vec![0.3 + 0.3 + 0.1]).unwrap());
        let json = store.to_json().unwrap();
        let back = ParamStore::from_json(&json).unwrap();
        for (name, t) in store.iter() {
            let r = back.get(name).unwrap();
            assert_eq!(t.shape(), r.shape());
            for (a, b) in t.values().iter().zip(r.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
