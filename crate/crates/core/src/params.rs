//! Named parameter storage shared by the decomposition and segmentation
//! networks, plus the student/teacher bookkeeping built on top of it.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    /// Panics with the missing name; model code only asks for names it created.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from state"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.0.values().map(|t| t.len()).sum()
    }

    /// Same names with the same shapes.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Congruence(format!(
                "{} tensors vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.0.iter().zip(other.0.iter()) {
            if na != nb {
                return Err(Error::Congruence(format!("`{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Congruence(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Euclidean distance between two congruent sets, over every entry.
    pub fn distance(&self, other: &ParamSet) -> Result<f64> {
        self.check_congruent(other)?;
        let sq: f64 = self
            .0
            .values()
            .zip(other.0.values())
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum();
        Ok(sq.sqrt())
    }

    fn digest_into(&self, hasher: &mut Sha256) {
        for (name, t) in &self.0 {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics) of the full decomposition + segmentation model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: ParamSet,
    pub buffers: ParamSet,
}

impl ModelState {
    pub fn check_congruent(&self, other: &ModelState) -> Result<()> {
        self.params.check_congruent(&other.params)?;
        self.buffers.check_congruent(&other.buffers)
    }

    /// Hex SHA-256 over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.params.digest_into(&mut hasher);
        hasher.update(b"|buffers|");
        self.buffers.digest_into(&mut hasher);
        hex_digest(hasher)
    }

    pub fn has_non_finite(&self) -> Option<String> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n.clone())
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform initialisation in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[(&str, &[usize], f64)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, s, v) in values {
            p.insert(*n, Tensor::from_elem(IxDyn(s), *v));
        }
        p
    }

    #[test]
    fn congruence_detects_name_and_shape_differences() {
        let a = set(&[("a", &[2], 1.0), ("b", &[3], 0.0)]);
        assert!(a.check_congruent(&set(&[("a", &[2], 5.0), ("b", &[3], 1.0)])).is_ok());
        assert!(a.check_congruent(&set(&[("a", &[2], 5.0), ("c", &[3], 1.0)])).is_err());
        assert!(a.check_congruent(&set(&[("a", &[2], 5.0), ("b", &[4], 1.0)])).is_err());
        assert!(a.check_congruent(&set(&[("a", &[2], 5.0)])).is_err());
    }

    #[test]
    fn distance_and_fingerprint() {
        let a = set(&[("a", &[2], 1.0)]);
        let b = set(&[("a", &[2], 4.0)]);
        assert!((a.distance(&b).unwrap() - 18f64.sqrt()).abs() < 1e-12);
        let sa = ModelState { params: a.clone(), buffers: ParamSet::new() };
        let sb = ModelState { params: b, buffers: ParamSet::new() };
        assert_ne!(sa.fingerprint(), sb.fingerprint());
        assert_eq!(sa.fingerprint(), sa.clone().fingerprint());
    }
}
