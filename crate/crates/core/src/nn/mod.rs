//! Parameters, forward contexts and the layer zoo shared by every model.

mod layers;

pub use layers::{Act, AttentionGate, BatchNorm2d, ChannelNorm, Conv2d, ConvBnAct, SqueezeExcite};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{Gradients, Graph, Scalar, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Weight,
    /// Running statistics and other non-gradient state.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Flat, ordered collection of a model's tensors and their gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), grads: Vec::new() }
    }

    pub fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        debug_assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, kind, trainable: kind == ParamKind::Weight });
        self.grads.push(None);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Marks every weight whose name starts with `prefix`; returns how many changed.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.kind == ParamKind::Weight && e.name.starts_with(prefix)) {
            if e.trainable != trainable {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self) {
        self.set_trainable("", true);
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight && e.trainable).map(|e| e.value.len()).sum()
    }

    /// Number of weight scalars, trainable or not.
    pub fn count_weights(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.len()).sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds the parameter gradients recorded on `graph` into the store.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (id, g) in graph.param_grads(grads) {
            match &mut self.grads[id.0] {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
    }

    /// Applies `f(value, grad)` to every trainable weight that has a gradient.
    pub fn for_each_trainable(&mut self, mut f: impl FnMut(usize, &mut [T], &[T])) {
        for (i, (e, g)) in self.entries.iter_mut().zip(self.grads.iter()).enumerate() {
            if e.kind != ParamKind::Weight || !e.trainable {
                continue;
            }
            if let Some(g) = g {
                f(i, e.value.data_mut(), g.data());
            }
        }
    }

    /// Copies all values from `other`, which must have an identical layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.entries.len(), other.entries.len(), "parameter layout mismatch");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            a.value = b.value.clone();
        }
    }

    /// Copies of every value, in store order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restores values taken by [`ParamStore::snapshot`]; extra entries are left alone.
    pub fn restore(&mut self, values: &[Tensor<T>]) {
        for (e, v) in self.entries.iter_mut().zip(values) {
            assert_eq!(e.value.shape(), v.shape(), "snapshot layout mismatch at {}", e.name);
            e.value = v.clone();
        }
    }

    /// Drops every entry from position `len` on.
    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
        self.grads.truncate(len);
    }

    /// SHA-256 over names, shapes and little-endian values of every tensor.
    pub fn digest(&self) -> String {
        self.digest_first(self.entries.len())
    }

    /// Like [`ParamStore::digest`] but over the first `len` entries only.
    pub fn digest_first(&self, len: usize) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries[..len.min(self.entries.len())] {
            h.update(e.name.as_bytes());
            for d in e.value.shape().dims() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            T::write_le(e.value.data(), &mut buf);
            h.update(&buf);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Forward-pass state: the tape, the parameters it reads and the norm mode.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub store: &'a mut ParamStore<T>,
    /// Batch norms use batch statistics.
    pub train: bool,
    /// Batch norms fold batch statistics into running averages (train mode only).
    pub update_stats: bool,
    cache: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, train: bool) -> Self {
        let n = store.len();
        Ctx { graph: Graph::new(), store, train, update_stats: train, cache: vec![None; n] }
    }

    /// Continues recording on a graph taken from an earlier context over the same store.
    pub fn resume(store: &'a mut ParamStore<T>, graph: Graph<T>, train: bool) -> Self {
        let n = store.len();
        Ctx { graph, store, train, update_stats: train, cache: vec![None; n] }
    }

    /// Releases the store borrow, keeping the recorded tape.
    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let trainable = e.kind == ParamKind::Weight && e.trainable;
        let v = self.graph.param_leaf(e.value.clone(), id, trainable);
        self.cache[id.0] = Some(v);
        v
    }

    /// Runs backward from `loss` and accumulates parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Gradients<T> {
        let grads = self.graph.backward(loss);
        self.store.accumulate(&self.graph, &grads);
        grads
    }
}

/// Deterministic parameter initialiser with hierarchical names.
pub struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed), scope: Vec::new() }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let r = f(self);
        self.scope.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`.
    pub fn he(&mut self, leaf: &str, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.numel()).map(|_| T::c(normal.sample(&mut self.rng))).collect();
        let name = self.full_name(leaf);
        self.store.push(name, Tensor::from_vec(shape, data), ParamKind::Weight)
    }

    pub fn constant(&mut self, leaf: &str, shape: Shape, v: f64) -> ParamId {
        let name = self.full_name(leaf);
        self.store.push(name, Tensor::full(shape, T::c(v)), ParamKind::Weight)
    }

    pub fn buffer(&mut self, leaf: &str, shape: Shape, v: f64) -> ParamId {
        let name = self.full_name(leaf);
        self.store.push(name, Tensor::full(shape, T::c(v)), ParamKind::Buffer)
    }

    /// Supplies a pre-built tensor (e.g. an identity projection).
    pub fn tensor(&mut self, leaf: &str, t: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.push(name, t, ParamKind::Weight)
    }
}
