//! Named parameter storage and builder-style binding.
//!
//! A [`ParamStore`] owns the master copies of all weights as shared buffers.
//! Models are constructed through a [`ParamBuilder`]: each `get` either
//! initializes a missing entry (drawing from the builder's RNG in
//! construction order, which is what makes init deterministic) or binds the
//! existing entry — so the same construction code serves fresh training,
//! checkpoint loading, and per-worker rebinding.

use crate::rng::{stream_rng, Stream};
use crate::tensor::{serialize, Element, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

#[derive(Clone)]
pub struct Param<E: Element> {
    pub data: Arc<Vec<E>>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Ordered (BTreeMap) collection of named parameters. Cloning is cheap — the
/// buffers are shared — and the clone is `Send`, so snapshots can cross
/// threads.
#[derive(Clone, Default)]
pub struct ParamStore<E: Element> {
    entries: BTreeMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: Arc<Vec<E>>, trainable: bool) {
        self.entries.insert(
            name,
            Param {
                data,
                shape,
                trainable,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deterministic (name-sorted) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<E>)> {
        self.entries.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        let f32_store: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .entries
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    p.shape.clone(),
                    p.data.iter().map(|v| v.to_f32()).collect(),
                )
            })
            .collect();
        let refs: Vec<(&str, &[usize], &[f32])> = f32_store
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
            .collect();
        serialize::write_tensors(w, &refs)
    }

    /// Load a weight container. Trainable flags all default to true; binding
    /// through a builder applies the model's actual freeze policy.
    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, shape, data) in serialize::read_tensors(r)? {
            let converted: Vec<E> = data.iter().map(|&v| E::from_f32(v)).collect();
            store.insert(name, shape, Arc::new(converted), true);
        }
        Ok(store)
    }
}

/// How a freshly-created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal(0, σ) resampled until |x| ≤ 2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

impl Init {
    fn draw<E: Element>(self, numel: usize, rng: &mut ChaCha8Rng) -> Vec<E> {
        match self {
            Init::TruncNormal(sigma) => {
                let dist = Normal::new(0.0, sigma).expect("sigma > 0");
                (0..numel)
                    .map(|_| {
                        loop {
                            let x: f64 = dist.sample(rng);
                            if x.abs() <= 2.0 * sigma {
                                return E::from_f64(x);
                            }
                        }
                    })
                    .collect()
            }
            Init::Zeros => vec![E::ZERO; numel],
            Init::Ones => vec![E::ONE; numel],
            Init::Const(c) => vec![E::from_f64(c); numel],
        }
    }
}

struct BuilderInner<E: Element> {
    store: ParamStore<E>,
    rng: ChaCha8Rng,
    bound: Vec<(String, Tensor<E>)>,
}

/// Cheap-to-clone handle used while constructing a model. `pp` pushes a path
/// segment; `get` creates-or-binds one parameter.
pub struct ParamBuilder<E: Element> {
    inner: Rc<RefCell<BuilderInner<E>>>,
    prefix: String,
}

impl<E: Element> Clone for ParamBuilder<E> {
    fn clone(&self) -> Self {
        ParamBuilder {
            inner: Rc::clone(&self.inner),
            prefix: self.prefix.clone(),
        }
    }
}

impl<E: Element> ParamBuilder<E> {
    pub fn new(store: ParamStore<E>, init_seed: u64) -> Self {
        ParamBuilder {
            inner: Rc::new(RefCell::new(BuilderInner {
                store,
                rng: stream_rng(init_seed, Stream::Init, 0),
                bound: Vec::new(),
            })),
            prefix: String::new(),
        }
    }

    /// Child builder with `seg` appended to the path.
    pub fn pp(&self, seg: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            seg.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, seg.as_ref())
        };
        ParamBuilder {
            inner: Rc::clone(&self.inner),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Create-or-bind a parameter as a graph leaf.
    pub fn get(
        &self,
        shape: &[usize],
        name: &str,
        init: Init,
        trainable: bool,
    ) -> Result<Tensor<E>> {
        let full = self.full_name(name);
        let mut inner = self.inner.borrow_mut();
        let data = match inner.store.get(&full) {
            Some(p) => {
                if p.shape != shape {
                    return Err(Error::Config(format!(
                        "parameter \"{full}\" has shape {:?} in the store but the model wants {shape:?}",
                        p.shape
                    )));
                }
                Arc::clone(&p.data)
            }
            None => {
                let numel: usize = shape.iter().product();
                let data = Arc::new(init.draw::<E>(numel, &mut inner.rng));
                inner
                    .store
                    .insert(full.clone(), shape.to_vec(), Arc::clone(&data), trainable);
                data
            }
        };
        // Keep the store's freeze flag in sync with the model's choice.
        if let Some(p) = inner.store.get_mut(&full) {
            p.trainable = trainable;
        }
        let leaf = Tensor::leaf(data, shape, trainable)?;
        inner.bound.push((full, leaf.clone()));
        Ok(leaf)
    }

    /// Tear down the builder, returning the (possibly grown) store and the
    /// leaves bound during construction, in construction order.
    pub fn finish(self) -> (ParamStore<E>, Vec<(String, Tensor<E>)>) {
        let inner = Rc::try_unwrap(self.inner)
            .unwrap_or_else(|_| panic!("ParamBuilder::finish with live child builders"))
            .into_inner();
        (inner.store, inner.bound)
    }

    /// Draw from the builder's init stream (for components that need raw
    /// randomness during construction, with the same determinism guarantees).
    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.inner.borrow_mut().rng)
    }
}

/// Convenience: fraction kept by `u01` draws, used in tests.
pub fn uniform01<E: Element>(rng: &mut ChaCha8Rng) -> E {
    E::from_f64(rng.gen::<f64>())
}
