use indexmap::IndexMap;

use crate::error::{mismatch, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Whether an entry is optimized or only carried along (e.g. running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Handle to an entry of a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of uniquely named parameters belonging to one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar = f32> {
    entries: IndexMap<String, Parameter<T>>,
}

/// Tape variables for every entry of a [`ParamSet`], valid for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let (idx, _) = self.entries.insert_full(name.clone(), Parameter { name, value, grad, kind });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.values_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    /// Records every entry on `tape`. Trainable entries receive gradients only when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .entries
            .values()
            .map(|p| {
                if trainable && p.kind == ParamKind::Trainable {
                    tape.var(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars, trainable })
    }

    /// Adds the gradients of bound trainable entries into `Parameter::grad`.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &v) in self.entries.values_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Replaces values by name; every name and shape must match.
    pub fn load_values(&mut self, mut values: IndexMap<String, Tensor<T>>) -> Result<()> {
        for p in self.entries.values_mut() {
            let v = values
                .shift_remove(&p.name)
                .ok_or_else(|| mismatch("load_values", format!("missing entry {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(mismatch("load_values", format!("{}: {:?} vs {:?}", p.name, v.shape(), p.value.shape())));
            }
            p.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(mismatch("load_values", format!("unexpected entry {extra}")));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    Parameter { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast(), kind: p.kind },
                )
            })
            .collect();
        ParamSet { entries }
    }

    /// Squared L2 norm over trainable values.
    pub fn sq_norm(&self) -> f64 {
        self.trainable().map(|p| p.value.sq_norm().as_f64()).sum()
    }
}
