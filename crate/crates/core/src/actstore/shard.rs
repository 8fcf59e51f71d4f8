use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::container;
use super::types::PromptMode;
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"ACTS";

/// Ragged per-example token activations for one (dataset, layer, prompt mode).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    pub dataset_name: String,
    pub layer: u32,
    pub prompt_mode: PromptMode,
    pub d_model: usize,
    pub example_ids: Vec<String>,
    /// Token-major matrices, one per example id.
    pub matrices: Vec<Array2<f32>>,
}

// Field order is the on-disk key order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardHeader {
    dataset: String,
    layer: u32,
    prompt_mode: PromptMode,
    d_model: usize,
    dtype: String,
    example_ids: Vec<String>,
    token_counts: Vec<usize>,
}

impl ActivationShard {
    pub fn new(dataset_name: impl Into<String>, layer: u32, prompt_mode: PromptMode, d_model: usize) -> Self {
        Self {
            dataset_name: dataset_name.into(),
            layer,
            prompt_mode,
            d_model,
            example_ids: Vec::new(),
            matrices: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, matrix: Array2<f32>) {
        self.example_ids.push(id.into());
        self.matrices.push(matrix);
    }

    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.matrices.iter().map(|m| m.nrows()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Invariant("d_model must be positive".into()));
        }
        if self.example_ids.len() != self.matrices.len() {
            return Err(Error::Invariant(format!(
                "{} example ids but {} matrices",
                self.example_ids.len(),
                self.matrices.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.example_ids.len());
        for (id, m) in self.example_ids.iter().zip(&self.matrices) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invariant(format!("duplicate example id {id:?} in shard")));
            }
            if m.nrows() == 0 {
                return Err(Error::Invariant(format!("example {id:?} has no token rows")));
            }
            if m.ncols() != self.d_model {
                return Err(Error::Invariant(format!(
                    "example {id:?} has {} columns, d_model is {}",
                    m.ncols(),
                    self.d_model
                )));
            }
        }
        Ok(())
    }

    /// Checks that every example id belongs to `dataset`.
    pub fn validate_against(&self, dataset: &super::Dataset) -> Result<()> {
        let index = dataset.index();
        for id in &self.example_ids {
            if !index.contains_key(id.as_str()) {
                return Err(Error::UnknownExample(id.clone()));
            }
        }
        Ok(())
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.example_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn matrix(&self, id: &str) -> Option<ArrayView2<'_, f32>> {
        self.example_ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.matrices[i].view())
    }

    /// Element-exact comparison on f32 bit patterns (NaN-safe).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dataset_name == other.dataset_name
            && self.layer == other.layer
            && self.prompt_mode == other.prompt_mode
            && self.d_model == other.d_model
            && self.example_ids == other.example_ids
            && self.matrices.len() == other.matrices.len()
            && self
                .matrices
                .iter()
                .zip(&other.matrices)
                .all(|(a, b)| a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = ShardHeader {
            dataset: self.dataset_name.clone(),
            layer: self.layer,
            prompt_mode: self.prompt_mode,
            d_model: self.d_model,
            dtype: "f32".into(),
            example_ids: self.example_ids.clone(),
            token_counts: self.matrices.iter().map(|m| m.nrows()).collect(),
        };
        let mut payload = Vec::with_capacity(self.total_tokens() * self.d_model);
        for m in &self.matrices {
            payload.extend(m.iter().copied());
        }
        container::encode(SHARD_MAGIC, &header, &payload)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::decode::<ShardHeader>(path, bytes, SHARD_MAGIC)?;
        if header.dtype != "f32" {
            return Err(Error::InvalidHeader(format!("unsupported dtype {:?}", header.dtype)));
        }
        if header.example_ids.len() != header.token_counts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} example ids but {} token counts",
                header.example_ids.len(),
                header.token_counts.len()
            )));
        }
        let total: usize = header.token_counts.iter().sum();
        let values = container::payload_f32(payload, total * header.d_model)?;
        let mut matrices = Vec::with_capacity(header.token_counts.len());
        let mut offset = 0;
        for &t in &header.token_counts {
            let n = t * header.d_model;
            let m = Array2::from_shape_vec((t, header.d_model), values[offset..offset + n].to_vec())
                .expect("shape matches slice length");
            matrices.push(m);
            offset += n;
        }
        let shard = Self {
            dataset_name: header.dataset,
            layer: header.layer,
            prompt_mode: header.prompt_mode,
            d_model: header.d_model,
            example_ids: header.example_ids,
            matrices,
        };
        shard.validate()?;
        Ok(shard)
    }
}

/// Writes `shard` atomically; invariant violations are rejected before any bytes hit disk.
pub fn write_shard(shard: &ActivationShard, path: &Path) -> Result<()> {
    let bytes = shard.to_bytes()?;
    container::write_atomic(path, &bytes)
}

pub fn read_shard(path: &Path) -> Result<ActivationShard> {
    let bytes = std::fs::read(path)?;
    ActivationShard::from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> ActivationShard {
        let mut s = ActivationShard::new("ds", 3, PromptMode::SuffixOnly, 2);
        s.push("a", array![[1.0f32, 2.0]]);
        s
    }

    #[test]
    fn single_token_payload_is_eight_bytes() {
        let s = tiny();
        let bytes = s.to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + header_len + 8);
        assert_eq!(&bytes[0..4], b"ACTS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let raw = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
        assert_eq!(
            raw,
            r#"{"dataset":"ds","layer":3,"prompt_mode":"suffix_only","d_model":2,"dtype":"f32","example_ids":["a"],"token_counts":[1]}"#
        );
        assert_eq!(
            &bytes[12 + header_len..],
            [1.0f32.to_le_bytes(), 2.0f32.to_le_bytes()].concat()
        );
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.acts");
        let s = tiny();
        write_shard(&s, &path).unwrap();
        assert!(read_shard(&path).unwrap().bit_eq(&s));
    }

    #[test]
    fn empty_shard_round_trips() {
        let s = ActivationShard::new("empty", 0, PromptMode::None, 4);
        let bytes = s.to_bytes().unwrap();
        let back = ActivationShard::from_bytes(Path::new("mem"), &bytes).unwrap();
        assert!(back.bit_eq(&s));
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_payload() {
        let bytes = tiny().to_bytes().unwrap();
        let err = ActivationShard::from_bytes(Path::new("mem"), &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { what: "payload", .. }), "{err}");
    }

    #[test]
    fn trailing_bytes_are_a_dimension_mismatch() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let err = ActivationShard::from_bytes(Path::new("mem"), &bytes).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = ActivationShard::from_bytes(Path::new("mem"), &bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn wrong_version() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[4] = 2;
        let err = ActivationShard::from_bytes(Path::new("mem"), &bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 2, .. }), "{err}");
    }

    #[test]
    fn invalid_shard_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.acts");
        let mut s = tiny();
        s.push("b", Array2::zeros((0, 2)));
        assert!(matches!(write_shard(&s, &path), Err(Error::Invariant(_))));
        assert!(!path.exists());

        let mut s = tiny();
        s.push("a", array![[0.0f32, 0.0]]);
        assert!(matches!(write_shard(&s, &path), Err(Error::Invariant(_))));
        assert!(!path.exists());
    }

    #[test]
    fn nan_bit_patterns_survive() {
        let mut s = ActivationShard::new("ds", 0, PromptMode::None, 2);
        s.push("x", array![[f32::from_bits(0x7fc0_0001), -0.0]]);
        let back = ActivationShard::from_bytes(Path::new("mem"), &s.to_bytes().unwrap()).unwrap();
        assert!(back.bit_eq(&s));
    }
}
