use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Graph};
use crate::{Error, Float, Result, Tensor};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// A named trainable tensor and its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Float = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of parameters owned by one model component.
///
/// Every set carries a process-unique id; cloning yields a new id so a copied
/// key encoder never receives gradients meant for its source.
#[derive(Debug)]
pub struct ParamSet<T: Float = f32> {
    id: u64,
    params: Vec<Parameter<T>>,
}

impl<T: Float> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        ParamSet { id: fresh_id(), params: self.params.clone() }
    }
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { id: fresh_id(), params: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.params[index].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients of every leaf bound from this set.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (set, index, var) in graph.param_leaves() {
            if set != self.id {
                continue;
            }
            if let Some(g) = grads.get(var) {
                self.params[index].grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.params.iter().all(|p| p.grad.data().iter().all(|v| *v == T::zero()))
    }

    fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "parameter sets differ in length: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, source {} has {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Exponential moving average toward `source`: `self ← m·self + (1−m)·source`,
    /// evaluated in `f64` with one rounding per element.
    pub fn ema_from(&mut self, source: &ParamSet<T>, m: f64) -> Result<()> {
        self.check_compatible(source)?;
        for (dst, src) in self.params.iter_mut().zip(&source.params) {
            for (d, &s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = T::from_f64_lossy(m * d.to_f64_lossy() + (1.0 - m) * s.to_f64_lossy());
            }
        }
        Ok(())
    }

    pub fn copy_values_from(&mut self, source: &ParamSet<T>) -> Result<()> {
        self.check_compatible(source)?;
        for (dst, src) in self.params.iter_mut().zip(&source.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// Replaces all values, checking shapes in declaration order.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor for {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    /// SHA-256 over parameter shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}
