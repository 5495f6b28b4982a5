use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named trainable arrays with gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<HeaderEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Serializes as an 8-byte little-endian header length, a JSON header
    /// listing names, shapes and byte offsets, then the values as
    /// little-endian `f64`.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .params
            .iter()
            .map(|p| {
                let e = HeaderEntry { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols(), offset };
                offset += p.value.len() * 8;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { params: entries })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for x in p.value.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] =
            bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_end = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len());
        let header_end = header_end.ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        let payload = &bytes[header_end..];
        let mut store = ParamStore::new();
        for e in header.params {
            let n = e.rows * e.cols;
            let chunk = payload
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| Error::Format(format!("payload for {:?} out of range", e.name)))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            store.add(e.name, Matrix::from_vec(e.rows, e.cols, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Copies values from `other` by name; shapes must match.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {:?}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Format(format!("shape mismatch for parameter {:?}", p.name)));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_vec(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]).unwrap());
        s.add("b", Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        let bytes = s.to_checkpoint_bytes().unwrap();
        let back = ParamStore::from_checkpoint_bytes(&bytes).unwrap();
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bitwise_eq(&b.value));
        }
        assert!(ParamStore::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(s.num_elements(), 7);
    }
}
