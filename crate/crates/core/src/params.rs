//! Named parameter storage.
//!
//! Parameters and non-trainable buffers (batch-norm running statistics) live
//! side by side in creation order; that order is what makes checkpoints and
//! optimizer state deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.entries[id.0].value.shape() {
            return Err(Error::dim(format!(
                "parameter {}: shape {:?} cannot replace {:?}",
                self.entries[id.0].name,
                value.shape(),
                self.entries[id.0].value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    /// FNV-1a over names and value bits; stable fingerprint of the store.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for p in &self.entries {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(&[1.0, 2.0]));
        let c0 = s.checksum();
        s.set_value(id, Tensor::row(&[1.0, 2.5])).unwrap();
        assert_ne!(c0, s.checksum());
    }

    #[test]
    fn set_value_rejects_shape_change() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(&[1.0, 2.0]));
        assert!(s.set_value(id, Tensor::row(&[1.0])).is_err());
    }
}
