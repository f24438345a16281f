//! AdamW with decoupled weight decay, and checkpoint save/load.

use super::TrainConfig;
use crate::params::ParamStore;
use crate::tensor::Element;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Adam with the weight-decay term decoupled from the gradient: the decay
/// multiplies parameters directly by `1 − lr·λ` instead of being added to
/// the gradient, so it is independent of the moment normalization.
pub struct AdamW<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed steps; bias correction inside a step uses `t + 1`.
    pub t: u64,
    pub m: ParamStore<E>,
    pub v: ParamStore<E>,
}

impl<E: Element> AdamW<E> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One update over every trainable parameter in `store`.
    ///
    /// `grads` maps parameter names to cotangents; a missing entry counts as
    /// a zero gradient (moments still decay toward zero and weight decay
    /// still shrinks the parameter). Frozen parameters are untouched. A
    /// non-finite gradient aborts before any parameter is modified.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &BTreeMap<String, Vec<E>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter \"{name}\" (element {i})"
                )));
            }
        }
        let t = self.t + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let numel = p.data.len();
            if let Some(g) = grads.get(name) {
                if g.len() != numel {
                    return Err(Error::shape("optimizer_step", numel, g.len()));
                }
            }
            if self.m.get(name).is_none() {
                self.m.insert(
                    name.clone(),
                    p.shape.clone(),
                    Arc::new(vec![E::ZERO; numel]),
                    false,
                );
                self.v.insert(
                    name.clone(),
                    p.shape.clone(),
                    Arc::new(vec![E::ZERO; numel]),
                    false,
                );
            }
            let m_old = Arc::clone(&self.m.get(name).expect("moment exists").data);
            let v_old = Arc::clone(&self.v.get(name).expect("moment exists").data);
            let g = grads.get(name);

            let mut m_new = Vec::with_capacity(numel);
            let mut v_new = Vec::with_capacity(numel);
            let mut p_new = Vec::with_capacity(numel);
            for i in 0..numel {
                let gi = g.map_or(0.0, |g| g[i].to_f64());
                let mi = self.beta1 * m_old[i].to_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v_old[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                m_new.push(E::from_f64(mi));
                v_new.push(E::from_f64(vi));
                p_new.push(E::from_f64(p.data[i].to_f64() * shrink - update));
            }
            self.m.get_mut(name).expect("moment exists").data = Arc::new(m_new);
            self.v.get_mut(name).expect("moment exists").data = Arc::new(v_new);
            p.data = Arc::new(p_new);
        }
        self.t = t;
        Ok(())
    }
}

/// Sidecar metadata written next to each checkpoint's tensor container.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format: String,
    /// Completed training iterations.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub adam_t: u64,
    /// Root RNG seed, hex. All sampling streams derive from it statelessly,
    /// so this single value is the entire RNG state.
    pub seed_hex: String,
    /// Hash of the resume-relevant configuration core.
    pub config_hash: String,
    pub train: TrainConfig,
}

pub const CHECKPOINT_FORMAT: &str = "la-checkpoint-v1";
const MOMENT1_PREFIX: &str = "optim.m.";
const MOMENT2_PREFIX: &str = "optim.v.";

/// Model parameters plus optimizer state, storable as one tensor container
/// (`.latn`) and one JSON sidecar (same stem, `.json`). Tensor values are
/// stored in 32-bit; resume is bit-identical in the 32-bit compute mode.
pub struct Checkpoint<E: Element> {
    pub params: ParamStore<E>,
    pub adam_m: ParamStore<E>,
    pub adam_v: ParamStore<E>,
    pub meta: CheckpointMeta,
}

fn sidecar_path(latn: &Path) -> PathBuf {
    latn.with_extension("json")
}

impl<E: Element> Checkpoint<E> {
    /// Write `path` (the `.latn` container) and its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut combined = ParamStore::<E>::new();
        for (name, p) in self.params.iter() {
            combined.insert(name.clone(), p.shape.clone(), Arc::clone(&p.data), p.trainable);
        }
        for (prefix, st) in [(MOMENT1_PREFIX, &self.adam_m), (MOMENT2_PREFIX, &self.adam_v)] {
            for (name, p) in st.iter() {
                combined.insert(
                    format!("{prefix}{name}"),
                    p.shape.clone(),
                    Arc::clone(&p.data),
                    false,
                );
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        combined.save(std::fs::File::create(path)?)?;
        let mut json = serde_json::to_string_pretty(&self.meta)?;
        json.push('\n');
        let mut f = std::fs::File::create(sidecar_path(path))?;
        f.write_all(json.as_bytes())?;
        Ok(())
    }

    /// Load from either the `.latn` path or its `.json` sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let latn = if path.extension().is_some_and(|e| e == "json") {
            path.with_extension("latn")
        } else {
            path.to_path_buf()
        };
        let sidecar = sidecar_path(&latn);
        let meta: CheckpointMeta =
            serde_json::from_reader(std::fs::File::open(&sidecar).map_err(|e| {
                Error::Config(format!(
                    "cannot open checkpoint sidecar {}: {e}",
                    sidecar.display()
                ))
            })?)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unknown checkpoint format \"{}\" (expected \"{CHECKPOINT_FORMAT}\")",
                meta.format
            )));
        }
        let combined = ParamStore::<E>::load(std::fs::File::open(&latn).map_err(|e| {
            Error::Config(format!("cannot open checkpoint {}: {e}", latn.display()))
        })?)?;
        let mut params = ParamStore::new();
        let mut adam_m = ParamStore::new();
        let mut adam_v = ParamStore::new();
        for (name, p) in combined.iter() {
            let (target, key) = if let Some(rest) = name.strip_prefix(MOMENT1_PREFIX) {
                (&mut adam_m, rest.to_string())
            } else if let Some(rest) = name.strip_prefix(MOMENT2_PREFIX) {
                (&mut adam_v, rest.to_string())
            } else {
                (&mut params, name.clone())
            };
            target.insert(key, p.shape.clone(), Arc::clone(&p.data), p.trainable);
        }
        Ok(Checkpoint {
            params,
            adam_m,
            adam_v,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p".into(), vec![1], Arc::new(vec![value]), true);
        s
    }

    fn grad_of(v: f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("p".to_string(), vec![v])])
    }

    #[test]
    fn single_step_matches_closed_form() {
        // p = 1, g = 1, lr = 0.1, λ = 0: the bias-corrected first step is
        // lr·g/(|g| + ε) ≈ lr.
        let mut store = one_param(1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &grad_of(1.0), 0.1).unwrap();
        let p = store.get("p").unwrap().data[0];
        assert!((p - 0.9).abs() < 1e-6, "{p}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut store = one_param(2.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store, &grad_of(0.0), 0.1).unwrap();
        let p = store.get("p").unwrap().data[0];
        assert_eq!(p, 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut store = one_param(1.25);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &grad_of(0.0), 0.1).unwrap();
        opt.step(&mut store, &BTreeMap::new(), 0.1).unwrap();
        assert_eq!(store.get("p").unwrap().data[0].to_bits(), 1.25f64.to_bits());
    }

    #[test]
    fn nan_grad_aborts_naming_parameter() {
        let mut store = one_param(1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let err = opt
            .step(&mut store, &grad_of(f64::NAN), 0.1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("\"p\""), "{err}");
        assert_eq!(store.get("p").unwrap().data[0], 1.0, "no partial update");
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w".into(), vec![1], Arc::new(vec![3.0]), false);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store, &BTreeMap::from([("w".to_string(), vec![1.0])]), 0.1)
            .unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 3.0);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let grads = [0.7, -0.3];
        let mut p = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut store = one_param(1.0);
        let mut opt = AdamW::new(b1, b2, eps, 0.0);
        for &g in &grads {
            opt.step(&mut store, &grad_of(g), lr).unwrap();
        }
        assert!((store.get("p").unwrap().data[0] - p).abs() < 1e-12);
    }
}
