//! Named parameter registry and per-pass tape binding.
//!
//! Layers register parameters once at construction and hold [`ParamId`]s;
//! values live in the [`ParamStore`]. Each forward/backward pass opens a
//! [`Session`] that lazily binds touched parameters as tape leaves, so a
//! parameter that a mode never uses (e.g. the multimodal branch under
//! `no_mm`) has no tape presence and therefore no gradient buffer at all.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Tape, Tensor, TensorError};

pub type ParamId = usize;

/// How [`ParamStore::init_params`] fills a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub init: InitKind,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable parameters of a model, in creation order. Creation order is
/// the determinism contract: initialization draws one RNG stream across
/// entries in this order, so two models built from the same config share
/// bit-identical parameters for the same seed.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter filled with zeros until `init_params` runs.
    /// Names must be unique; a duplicate is a wiring bug, not a runtime
    /// condition, so it panics.
    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, init: InitKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        let numel = shape.iter().product();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape,
            data: Arc::new(vec![0.0; numel]),
            init,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Entries in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.numel()).sum()
    }

    /// Replace a parameter's values (optimizer step, checkpoint load).
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<(), TensorError> {
        let entry = &mut self.entries[id];
        if data.len() != entry.numel() {
            return Err(TensorError::SizeMismatch {
                op: "set_data",
                expected: entry.numel(),
                got: data.len(),
            });
        }
        entry.data = Arc::new(data);
        Ok(())
    }

    /// Initialize every parameter from its declared distribution, fully
    /// determined by `seed`: Glorot-uniform weights, zero biases, unit gains.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in &mut self.entries {
            let n = entry.numel();
            let data = match entry.init {
                InitKind::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                InitKind::Zeros => vec![0.0; n],
                InitKind::Ones => vec![1.0; n],
            };
            entry.data = Arc::new(data);
        }
    }
}

/// One forward/backward pass over a store: a fresh tape plus memoized leaf
/// bindings, so each parameter appears on the tape at most once and all its
/// uses accumulate into one gradient buffer.
pub struct Session<'s> {
    store: &'s ParamStore,
    pub tape: Tape,
    bound: Vec<Option<Tensor>>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            store,
            tape: Tape::new(),
            bound: vec![None; store.len()],
        }
    }

    /// A session whose tape records nothing (evaluation).
    pub fn inference(store: &'s ParamStore) -> Self {
        Session {
            store,
            tape: Tape::inference(),
            bound: vec![None; store.len()],
        }
    }

    /// The tape leaf for a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Tensor {
        if self.bound[id].is_none() {
            let entry = self.store.get(id);
            let raw = Tensor::shared(entry.shape.clone(), Arc::clone(&entry.data), None);
            self.bound[id] = Some(self.tape.watch(&raw));
        }
        self.bound[id].clone().unwrap()
    }

    /// The leaf binding, if this session ever touched the parameter.
    pub fn binding(&self, id: ParamId) -> Option<&Tensor> {
        self.bound.get(id).and_then(|b| b.as_ref())
    }

    /// Gradient buffer for a parameter under `grads`, or `None` when the
    /// parameter was unused or off the loss's ancestry.
    pub fn grad<'g>(&self, grads: &'g Gradients, id: ParamId) -> Option<&'g [f64]> {
        self.binding(id).and_then(|t| grads.wrt(t))
    }

    /// Gradient buffers for every parameter id, cloned out so the session
    /// (and with it the borrow of the store) can be dropped before an
    /// optimizer mutates the store. Absent entries stay `None`.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        (0..self.bound.len())
            .map(|id| self.grad(grads, id).map(<[f64]>::to_vec))
            .collect()
    }
}

/// Central finite-difference check over *store-held* parameters: `f` builds
/// a scalar loss from a session; every element of every parameter that the
/// analytic pass touched (and those it did not, expected zero) is probed by
/// perturbing the store. Returns the worst relative error, as
/// [`crate::tensor::finite_diff_check`] does for plain tensors.
pub fn finite_diff_check_store<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Session) -> Result<Tensor, TensorError>,
{
    finite_diff_check_store_where(store, f, h, |_| true)
}

/// [`finite_diff_check_store`] restricted to parameters whose name passes
/// `keep`. Needed wherever a stop-gradient makes the analytic derivative of
/// an upstream parameter intentionally differ from the numeric one: only
/// parameters with no path through the detach are comparable.
pub fn finite_diff_check_store_where<F, K>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    keep: K,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Session) -> Result<Tensor, TensorError>,
    K: Fn(&str) -> bool,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut sess = Session::new(store);
        let loss = f(&mut sess)?;
        let grads = sess.tape.backward(&loss)?;
        (0..store.len())
            .map(|id| sess.grad(&grads, id).map(|g| g.to_vec()))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut sess = Session::inference(store);
        f(&mut sess)?.item()
    };
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        if !keep(&store.get(id).name) {
            continue;
        }
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data[i];
            let mut bumped = store.get(id).data.to_vec();
            bumped[i] = orig + h;
            store.set_data(id, bumped)?;
            let up = eval(store)?;
            let mut bumped = store.get(id).data.to_vec();
            bumped[i] = orig - h;
            store.set_data(id, bumped)?;
            let down = eval(store)?;
            let mut restored = store.get(id).data.to_vec();
            restored[i] = orig;
            store.set_data(id, restored)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id].as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
