use super::Tensor;
use crate::{Error, Result, Scalar};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter within its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named parameter tensors of one network.
///
/// Every store has a process-unique id (clones get a fresh one) and every
/// parameter a version counter bumped on each write, so derived quantities
/// can be cached safely.
#[derive(Debug)]
pub struct ParamStore<T: Scalar = f64> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    versions: Vec<u64>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            versions: vec![0; self.versions.len()],
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            versions: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.versions.push(0);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn version(&self, id: ParamId) -> u64 {
        self.versions[id.0]
    }

    /// Mutable access; bumps the version.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.versions[id.0] += 1;
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape("ParamStore::set", &[self.tensors[id.0].shape(), value.shape()]));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `self <- (1 - tau) self + tau source`, parameter by parameter.
    pub fn soft_update_from(&mut self, source: &ParamStore<T>, tau: f64) -> Result<()> {
        if source.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: source.len(),
            });
        }
        let (keep, take) = (T::of(1.0 - tau), T::of(tau));
        for id in 0..self.len() {
            let src = source.tensors[id].data();
            if src.len() != self.tensors[id].numel() {
                return Err(Error::shape("soft_update", &[self.tensors[id].shape(), source.tensors[id].shape()]));
            }
            let dst = self.get_mut(ParamId(id)).data_mut();
            if tau == 1.0 {
                dst.copy_from_slice(src);
            } else {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = keep * *d + take * s;
                }
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from `(param, gradient)` pairs; parameters without a
    /// gradient are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)]) -> Result<()> {
        if self.m.len() < store.len() {
            for id in self.m.len()..store.len() {
                let n = store.get(ParamId(id)).numel();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get_mut(*id).data_mut();
            if g.len() != p.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.len() {
                let gi = g[i].f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = T::of(p[i].f64() - update);
            }
        }
        Ok(())
    }
}
