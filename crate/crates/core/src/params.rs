//! Named parameter store shared by every trainable module, plus AdamW.
//!
//! Parameters live outside the per-step graphs; a training step clones values
//! into leaf nodes, runs backward, then folds node gradients back into the
//! store. Stage gating and LoRA freezing are expressed through the
//! per-parameter `trainable` flag: frozen parameters enter graphs as
//! constants, so their gradients are structurally zero.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::tensor::Tensor;

pub type ParamId = usize;

pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Decoupled weight decay applies only where this is set (weight matrices,
    /// not biases/gains/embedding-like tables).
    pub decay: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate param {name}");
        let grad = Tensor::zeros(value.rows, value.cols);
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), value, grad, trainable: true, decay });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self.by_name.get(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Leaf node for this parameter; differentiable only if trainable.
    pub fn node(&self, g: &mut Graph, id: ParamId) -> NodeId {
        let p = &self.params[id];
        if p.trainable {
            g.leaf(p.value.clone())
        } else {
            g.constant(p.value.clone())
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Fold a graph's leaf gradients back into the store.
    /// `bindings` pairs each parameter with the node it was cloned into.
    pub fn accumulate(&mut self, g: &Graph, bindings: &[(ParamId, NodeId)]) {
        for &(pid, nid) in bindings {
            if let Some(grad) = g.grad(nid) {
                let p = &mut self.params[pid];
                for (a, b) in p.grad.data.iter_mut().zip(grad.data.iter()) {
                    *a += *b;
                }
            }
        }
    }

    /// Set trainability by name-prefix. Returns how many parameters matched.
    pub fn set_trainable_by_prefix(&mut self, prefixes: &[&str], trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.iter_mut() {
            p.trainable = false;
        }
    }

    /// Deterministic per-parameter RNG: independent of creation order.
    pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
    }
}

/// Binds parameters into a graph once per step and remembers the node ids so
/// gradients can be folded back. Repeated binds of the same parameter within
/// one graph reuse the same node (so its gradient accumulates naturally).
pub struct Binder {
    bindings: Vec<(ParamId, NodeId)>,
    seen: BTreeMap<ParamId, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bindings: Vec::new(), seen: BTreeMap::new() }
    }

    pub fn node(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.seen.get(&id) {
            return n;
        }
        let n = store.node(g, id);
        self.seen.insert(id, n);
        self.bindings.push((id, n));
        n
    }

    pub fn by_name(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
        let id = store.id(name);
        self.node(g, store, id)
    }

    pub fn apply_grads(&self, g: &Graph, store: &mut ParamStore) {
        store.accumulate(g, &self.bindings);
    }

    pub fn bindings(&self) -> &[(ParamId, NodeId)] {
        &self.bindings
    }
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// AdamW with decoupled weight decay and linear-warmup + cosine decay.
pub struct AdamW {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub total_steps: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamW {
    pub fn new(
        store: &ParamStore,
        lr_max: f64,
        weight_decay: f64,
        warmup: usize,
        total_steps: usize,
    ) -> Self {
        let m = store.iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        let v = store.iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        AdamW {
            lr_max,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup,
            total_steps,
            m,
            v,
            t: 0,
        }
    }

    /// Learning rate at `step`: 0 at step 0, lr_max at the end of warmup,
    /// cosine decay to exactly 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        assert!(step <= self.total_steps, "lr_at past schedule end");
        if self.warmup > 0 && step < self.warmup {
            return self.lr_max * step as f64 / self.warmup as f64;
        }
        let span = (self.total_steps - self.warmup).max(1) as f64;
        let frac = (step - self.warmup) as f64 / span;
        self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// One update over all trainable params using their accumulated grads.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.lr_at(self.t);
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.value.len() {
                let g = p.grad.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                let mut x = p.value.data[j];
                if p.decay {
                    x -= lr * self.weight_decay * x;
                }
                x -= lr * mh / (vh.sqrt() + self.eps);
                p.value.data[j] = x;
            }
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let store = ParamStore::new();
        let opt = AdamW::new(&store, 3e-4, 0.05, 100, 1000);
        assert_eq!(opt.lr_at(0), 0.0);
        assert!((opt.lr_at(100) - 3e-4).abs() < 1e-18);
        assert!(opt.lr_at(1000).abs() < 1e-12);
        // monotone rise in warmup, decay afterwards
        assert!(opt.lr_at(50) < opt.lr_at(100));
        assert!(opt.lr_at(500) < opt.lr_at(100));
        assert!(opt.lr_at(900) < opt.lr_at(500));
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(1, 2, 1.0), true);
        let b = store.add("b", Tensor::filled(1, 2, 1.0), true);
        store.get_mut(b).trainable = false;
        store.get_mut(a).grad = Tensor::filled(1, 2, 0.5);
        store.get_mut(b).grad = Tensor::filled(1, 2, 0.5);
        let mut opt = AdamW::new(&store, 1e-1, 0.0, 0, 10);
        opt.step(&mut store);
        assert!(store.value(a).data[0] < 1.0);
        assert_eq!(store.value(b).data[0], 1.0);
    }

    #[test]
    fn binder_reuses_nodes_and_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled(2, 2, 2.0), true);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let n1 = b.node(&mut g, &store, w);
        let n2 = b.node(&mut g, &store, w);
        assert_eq!(n1, n2);
        let y = g.emul(n1, n2);
        let l = g.sum_all(y);
        g.backward(l);
        b.apply_grads(&g, &mut store);
        // d/dw sum(w*w) = 2w = 4
        assert!(store.get(w).grad.data.iter().all(|&x| (x - 4.0).abs() < 1e-12));
    }
}
