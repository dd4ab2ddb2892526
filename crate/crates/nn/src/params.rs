use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::graph::{Gradients, Graph};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{NnError, Result};

static NEXT_STORE_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`]. Stores cloned with
/// [`ParamStore::duplicate`] share the same layout, so ids stay valid across them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers and step count of one Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
    pub(crate) step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.v[id.0]
    }
}

/// Named parameter tensors with gradient buffers and an Adam state.
#[derive(Debug)]
pub struct ParamStore<T> {
    key: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    grads: Vec<Tensor<T>>,
    adam: AdamState<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            key: fresh_key(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            adam: AdamState { m: Vec::new(), v: Vec::new(), step: 0 },
        }
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.grads.push(Tensor::zeros(&shape));
        self.adam.m.push(Tensor::zeros(&shape));
        self.adam.v.push(Tensor::zeros(&shape));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut AdamState<T> {
        &mut self.adam
    }

    /// Zeroed optimizer state with this store's layout, for a second optimizer
    /// over the same parameters.
    pub fn new_adam_state(&self) -> AdamState<T> {
        AdamState {
            m: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            v: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            step: 0,
        }
    }

    /// Adds the gradients of this store's trainable leaves in `graph`.
    /// Returns how many leaves matched.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> usize {
        let mut matched = 0;
        for leaf in graph.param_leaves().iter().filter(|l| l.store == self.key) {
            if let Some(g) = grads.get(leaf.var) {
                self.grads[leaf.id.0].add_assign(g);
                matched += 1;
            }
        }
        matched
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    /// Euclidean norm of all gradient buffers together.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }

    pub fn grads_all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|x| *x == T::zero()))
    }

    /// Bias-corrected Adam step with the store's own moments; zeroes gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let mut state = std::mem::replace(&mut self.adam, AdamState { m: Vec::new(), v: Vec::new(), step: 0 });
        self.adam_step_with(&mut state, cfg);
        self.adam = state;
    }

    /// Bias-corrected Adam step driven by an external moment state.
    pub fn adam_step_with(&mut self, state: &mut AdamState<T>, cfg: &AdamConfig) {
        assert_eq!(state.m.len(), self.values.len(), "Adam state layout mismatch");
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for i in 0..self.values.len() {
            let g = self.grads[i].data();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let p = Arc::make_mut(&mut self.values[i]).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.zero_grad();
    }

    /// Copy of the parameter values under a fresh identity, with zeroed
    /// gradients and optimizer state.
    pub fn duplicate(&self) -> Self {
        let mut out = Self::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.add(name, (**v).clone()).expect("names are unique");
        }
        out
    }

    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    /// Overwrites values from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(NnError::Layout("copy between stores with different layouts".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            *dst = Arc::clone(src);
        }
        Ok(())
    }

    /// All values flattened in store order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(NnError::Layout(format!("{} values for {} parameters", flat.len(), self.num_scalars())));
        }
        let mut off = 0;
        for v in &mut self.values {
            let d = Arc::make_mut(v).data_mut();
            let n = d.len();
            d.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// All gradients flattened in store order.
    pub fn flat_grads(&self) -> Vec<T> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    /// Order-sensitive FNV-1a fingerprint over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, v) in self.names.iter().zip(&self.values) {
            eat(name.as_bytes());
            for &d in v.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.as_f64().to_le_bytes());
            }
        }
        h
    }

    pub(crate) fn replace_adam(&mut self, state: AdamState<T>) {
        self.adam = state;
    }
}

/// Exponential-moving-average copy of a parameter store.
///
/// Each update keeps `1 − follow_rate` of the shadow and takes `follow_rate`
/// of the source.
#[derive(Debug)]
pub struct EmaShadow<T> {
    params: ParamStore<T>,
    follow_rate: f64,
}

impl<T: Real> EmaShadow<T> {
    pub fn new(source: &ParamStore<T>, follow_rate: f64) -> Self {
        Self { params: source.duplicate(), follow_rate }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn follow_rate(&self) -> f64 {
        self.follow_rate
    }

    pub fn update(&mut self, source: &ParamStore<T>) -> Result<()> {
        ema_update(&mut self.params, source, self.follow_rate)
    }
}

/// `shadow ← (1 − follow_rate)·shadow + follow_rate·source`.
pub fn ema_update<T: Real>(shadow: &mut ParamStore<T>, source: &ParamStore<T>, follow_rate: f64) -> Result<()> {
    if !shadow.same_layout(source) {
        return Err(NnError::Layout("EMA shadow and source differ in layout".into()));
    }
    let r = T::lit(follow_rate);
    for id in source.ids() {
        let src = source.get(id).data();
        let dst = shadow.get_mut(id).data_mut();
        for (d, &s) in dst.iter_mut().zip(src) {
            // same update written so that a shadow equal to its source stays bit-exact
            *d += r * (s - *d);
        }
    }
    Ok(())
}
