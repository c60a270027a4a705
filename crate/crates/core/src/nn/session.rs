use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Whether layers use batch statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Gradients of trainable parameters from one backward pass.
#[derive(Clone)]
pub struct Gradients<T> {
    grads: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One forward (and optionally backward) pass over a model's parameters.
///
/// Borrows the store immutably; batch-norm running-statistic updates are
/// collected and applied by the caller once the pass is done.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    track_grads: bool,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    taps: Vec<(String, Var)>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            track_grads: true,
            params: HashMap::new(),
            stat_updates: Vec::new(),
            taps: Vec::new(),
        }
    }

    /// Disables gradient tracking for parameters (pure inference).
    pub fn without_grads(mut self) -> Self {
        self.track_grads = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// The graph variable for a parameter, recorded once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let trainable = self.track_grads && entry.kind == ParamKind::Trainable;
        let v = self.graph.shared(self.store.shared(id), trainable);
        self.params.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.graph.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub(crate) fn record_stat(&mut self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    /// Remembers an intermediate activation under a stage name.
    pub fn tap(&mut self, name: &str, v: Var) {
        self.taps.push((name.to_string(), v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.graph.backward(loss)?;
        let mut grads = Vec::new();
        let mut ids: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        ids.sort();
        for (id, v) in ids {
            if let Some(g) = self.graph.take_grad(v) {
                grads.push((id, g));
            }
        }
        Ok(Gradients { grads })
    }

    pub fn into_stat_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.stat_updates
    }
}

/// Applies collected running-statistic updates to the store.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
    for (id, value) in updates {
        if store.entry(id).kind != ParamKind::Buffer {
            return Err(Error::InvalidArgument(format!(
                "{} is not a buffer",
                store.entry(id).name
            )));
        }
        store.set(id, value)?;
    }
    Ok(())
}
