//! Named parameter storage and the per-forward [`Session`] that binds
//! parameters into a [`Graph`].

use std::collections::HashMap;

use crate::autodiff::{BatchStats, Gradients, Graph, OpTag, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; updated by the optimizer and included in parameter counts.
    Learnable,
    /// Learnable but only used in training (the speaker classifier).
    Head,
    /// Running statistics; saved in checkpoints, never optimized.
    Buffer,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Learnable => "param",
            ParamKind::Head => "head",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "param" => Some(ParamKind::Learnable),
            "head" => Some(ParamKind::Head),
            "buffer" => Some(ParamKind::Buffer),
            _ => None,
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {}", name));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.entries[id.0].value.expect_same_shape(&value)?;
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Scalar count over entries of the given kinds.
    pub fn count(&self, kinds: &[ParamKind]) -> usize {
        self.entries
            .iter()
            .filter(|e| kinds.contains(&e.kind))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Folds training-mode batch statistics into running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let m = u.momentum;
                for (r, b) in self.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from one batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    track_grads: bool,
    bound: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            track_grads: true,
            bound: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Session whose parameters are bound as constants; nothing is
    /// differentiable unless an input asks for it.
    pub fn inference(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            track_grads: false,
            ..Self::new(store, mode)
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, tag: OpTag) {
        self.graph.inject_fault(tag);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Graph node for a stored parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let e = self.store.entry(id);
        let trainable = self.track_grads && e.kind.is_trainable();
        let v = self.graph.leaf(e.value.clone(), trainable)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.graph.leaf(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        v.sort();
        v
    }

    pub(crate) fn record_bn(&mut self, u: BnUpdate) {
        self.bn_updates.push(u);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Runs backward from `loss` (must be the last recorded scalar) and
    /// returns gradients for every bound trainable parameter.
    pub fn param_grads(&mut self, loss: Var) -> Result<(Gradients, Vec<(ParamId, Tensor)>)> {
        let mut grads = self.graph.backward(loss, Tensor::scalar(1.0))?;
        let mut out = Vec::new();
        for (p, v) in self.bound_params() {
            if let Some(g) = grads.take(v) {
                out.push((p, g));
            }
        }
        Ok((grads, out))
    }
}
