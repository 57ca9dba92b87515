//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// False for running statistics and other buffers the optimizer skips.
    pub trainable: bool,
}

/// Insertion-ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("ParamStore::add", format!("duplicate name '{name}'")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Weight matrix `[out×in]` drawn from `U(±sqrt(6 / (in + out)))`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Tensor::new([out_dim, in_dim], data)?, true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.find(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces values from `other`, matching by name. Every entry of `self`
    /// must be present in `other` with the same shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in other {
            let id = self.find(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let slot = &mut self.entries[id.0].value;
            if slot.shape() != t.shape() {
                return Err(Error::shape("ParamStore::load_from", slot.shape(), t.shape()));
            }
            *slot = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(
                "ParamStore::load_from",
                format!("missing '{}'", self.entries[i].name),
            ));
        }
        Ok(())
    }
}

/// One forward pass: a fresh graph, lazily bound parameters, the mode, and
/// the dropout RNG.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Forward<'a> {
    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self::build(store, Mode::Train, Some(rng))
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::build(store, Mode::Eval, None)
    }

    fn build(store: &'a ParamStore, mode: Mode, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for a stored tensor, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.graph.leaf(e.value.clone(), e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses an existing graph node as the value of a stored parameter for
    /// the rest of this pass.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    pub(crate) fn push_stat_update(&mut self, id: ParamId, value: Tensor) {
        self.stat_updates.push((id, value));
    }

    /// Running-statistic updates recorded in train mode, to be written back
    /// with [`apply_stat_updates`].
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every bound trainable parameter after backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, t) in updates {
        *store.get_mut(id) = t;
    }
}
