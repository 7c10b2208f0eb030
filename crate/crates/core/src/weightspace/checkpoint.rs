use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::numkit::{Scalar, Tensor};
use crate::{Error, Result};

/// Ordered map from parameter name to tensor, plus free-form metadata.
///
/// Names are kept sorted (a `BTreeMap`), so iteration order, hashing and
/// serialization are all canonical. Two checkpoints are algebra-compatible
/// iff their name and shape sets match exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
    meta: BTreeMap<String, String>,
}

impl<S: Scalar> Default for Checkpoint<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), meta: BTreeMap::new() }
    }

    pub fn from_tensors(items: impl IntoIterator<Item = (String, Tensor<S>)>) -> Result<Self> {
        let mut ckpt = Self::new();
        for (name, t) in items {
            ckpt.insert(name, t)?;
        }
        Ok(ckpt)
    }

    /// Adds a tensor; duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::invalid("tensor name must be 1..=65535 bytes"));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces an existing tensor of the same shape.
    pub fn replace(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(Error::invalid(format!(
                "replace {name}: shape {:?} != {:?}",
                t.shape(),
                slot.shape()
            ))),
            None => Err(Error::invalid(format!("no tensor named {name}"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).ok_or_else(|| Error::invalid(format!("missing tensor {name}")))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.set_meta(key, value);
        self
    }

    pub fn clear_meta(&mut self) {
        self.meta.clear();
    }

    pub fn is_compatible<T: Scalar>(&self, other: &Checkpoint<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn check_compatible<T: Scalar>(&self, other: &Checkpoint<T>) -> Result<()> {
        if self.is_compatible(other) {
            return Ok(());
        }
        let mine: Vec<_> = self.names().collect();
        let theirs: Vec<_> = other.names().collect();
        if let Some(name) = mine.iter().find(|n| other.get(n).is_none()) {
            return Err(Error::invalid(format!("checkpoints incompatible: {name} missing on one side")));
        }
        if let Some(name) = theirs.iter().find(|n| self.get(n).is_none()) {
            return Err(Error::invalid(format!("checkpoints incompatible: {name} missing on one side")));
        }
        for (name, t) in self.iter() {
            let o = other.get(name).expect("checked above");
            if t.shape() != o.shape() {
                return Err(Error::invalid(format!(
                    "checkpoints incompatible: {name} has shape {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        unreachable!("incompatible checkpoints must differ in a name or a shape")
    }

    /// Elementwise combination of two compatible checkpoints; metadata is
    /// left empty.
    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(other.tensors.values())
            .map(|((name, a), b)| Ok((name.clone(), a.zip_map(b, &f)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors, meta: BTreeMap::new() })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| Ok((name.clone(), t.map(&f)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors, meta: BTreeMap::new() })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        self.map(|a| a * c)
    }

    /// In place `self += c · other`.
    pub fn axpy(&mut self, c: S, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (t, o) in self.tensors.values_mut().zip(other.tensors.values()) {
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, &b)| *a += c * b);
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Checkpoint<T> {
        Checkpoint {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Keeps only tensors whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    /// Max absolute elementwise difference across all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data().iter().all(|x| x.is_finite()))
    }

    /// Sum of squared entries, accumulated in f64.
    pub fn sum_sq(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_sq_f64).sum()
    }

    /// Content hash over names, shapes, dtype and raw element bits.
    /// Metadata does not participate.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update([S::DTYPE, t.rank() as u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.len() * S::BYTES);
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
