//! Reverse-mode automatic differentiation over dense arrays, plus the
//! optimizer and numerical primitives every other module consumes.
//!
//! The computation graph is a define-by-run tape rebuilt on every step.
//! Parameters live outside any tape as plain [`Tensor`]s owned by a
//! [`ParamSet`]; a forward pass leafs them into a [`tape::Tape`], and
//! `backward` returns a [`GradMap`] keyed by parameter id.

pub mod check;
pub mod kernels;
pub mod optim;
pub mod tape;

use crate::error::{Result, WamError};
use crate::rng::Rng64;
use std::collections::BTreeMap;

/// Compute precision for a tape. `F64` is the default and the precision all
/// tests run at; `F32` rounds every stored value and gradient to f32,
/// emulating single-precision execution at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn quantize(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Dense multi-dimensional array. Holds an optional gradient of identical
/// shape; graph linkage only exists while the tensor is leafed onto a live
/// tape, so a detached tensor never receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng64) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.normal() * std).collect();
        Tensor::new(shape, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) {
        assert_eq!(g.len(), self.values.len(), "grad shape mismatch");
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Gradients keyed by parameter id. Every parameter leafed onto the tape has
/// an entry; parameters unreachable from the backward root hold zeros.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: BTreeMap<usize, Vec<f64>>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pid: usize, g: Vec<f64>) {
        match self.grads.get_mut(&pid) {
            Some(acc) => {
                assert_eq!(acc.len(), g.len());
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(pid, g);
            }
        }
    }

    pub fn get(&self, pid: usize) -> Option<&[f64]> {
        self.grads.get(&pid).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut Vec<f64>)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Merge another map into this one, accumulating overlapping entries.
    pub fn merge(&mut self, other: GradMap) {
        for (pid, g) in other.grads {
            self.insert(pid, g);
        }
    }
}

/// Ordered, named collection of trainable tensors. The `decay` flag marks
/// parameters subject to weight decay (weight matrices; embeddings, biases
/// and norm gains are exempt).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor, decay: bool) -> usize {
        let id = self.tensors.len();
        self.names.push(name.into());
        self.tensors.push(t);
        self.decay.push(decay);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn decays(&self, id: usize) -> bool {
        self.decay[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (i, self.names[i].as_str(), t))
    }

    /// Write gradients from a map into the tensors' `grad` slots.
    pub fn apply_grads(&mut self, grads: &GradMap) {
        for (pid, g) in grads.iter() {
            self.tensors[pid].set_grad(g.to_vec());
        }
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Bitwise equality of all values (used by freeze assertions).
    pub fn values_equal(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.values == b.values)
    }
}

pub(crate) fn expect_scalar(shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != 1 {
        return Err(WamError::contract(format!(
            "expected scalar, got shape {:?}",
            shape
        )));
    }
    Ok(())
}
