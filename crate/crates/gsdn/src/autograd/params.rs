use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Buffers (batch-norm running statistics) are persisted but never updated by the optimizer.
    pub trainable: bool,
}

/// Per-parameter gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[T]) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Named parameter arrays with gradient accumulators and momentum buffers.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: FxHashMap<String, usize>,
    grads: Vec<Option<Vec<T>>>,
    momentum: Vec<Vec<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: FxHashMap::default(),
            grads: Vec::new(),
            momentum: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} needs {n} values, got {}", data.len())));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.momentum.push(if trainable { vec![T::zero(); n] } else { Vec::new() });
        self.grads.push(None);
        self.entries.push(ParamEntry {
            name,
            shape,
            data,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn momentum(&self, id: ParamId) -> &[T] {
        &self.momentum[id.0]
    }

    pub fn momentum_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        &mut self.momentum[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Adds a backward pass's gradients into the accumulators. Trainable
    /// parameters the pass did not reach receive zeros.
    pub fn accumulate(&mut self, g: &Gradients<T>) {
        for (i, e) in self.entries.iter().enumerate() {
            if !e.trainable {
                continue;
            }
            let acc = self.grads[i].get_or_insert_with(|| vec![T::zero(); e.data.len()]);
            if let Some(src) = g.get(ParamId(i)) {
                acc.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
            }
        }
    }

    pub fn has_grads(&self) -> bool {
        self.entries
            .iter()
            .zip(&self.grads)
            .any(|(e, g)| e.trainable && g.is_some())
    }

    /// Multiplies every accumulated gradient by `k`.
    pub fn scale_grads(&mut self, k: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn take_grad(&mut self, id: ParamId) -> Option<Vec<T>> {
        self.grads[id.0].take()
    }

    /// Same names and values in another precision; gradients are dropped.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
            grads: vec![None; self.entries.len()],
            momentum: self
                .momentum
                .iter()
                .map(|m| m.iter().map(|v| U::lit(v.as_f64())).collect())
                .collect(),
        }
    }
}
