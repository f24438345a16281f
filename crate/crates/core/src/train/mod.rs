//! Episodic training: focal loss over per-class cross-entropies, AdamW with
//! decoupled weight decay, linear warmup into step-wise cosine decay, epoch
//! checkpoints, and a metrics CSV.
//!
//! Determinism contract: every stochastic choice of iteration `i` draws from
//! a stream derived statelessly from `(seed, i)`, so resuming from a
//! checkpoint replays the exact byte stream an uninterrupted run would have
//! produced (in 32-bit compute, which is also the checkpoint storage width).

pub mod optim;

pub use optim::{AdamW, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};

use crate::data::{
    build_folds, downsample_labels, episode_labels, labels_to_canvas, randomize_prompt_types,
    sample_episode_batch, BatchConfig, Dataset, Episode, PromptMode,
};
use crate::model::{episode_assignment, episode_image_tensor, episode_support_tensor, Model, ModelConfig};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Element, Tensor};
use crate::{bail_config, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ── loss ──────────────────────────────────────────────────────────────────

/// Per-class weighting of the loss.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// Every class weighs 1.
    #[default]
    Uniform,
    /// Classes weigh inversely to their pixel count in the target.
    InverseFrequency,
}

/// Class weights for one target map. Classes with no pixels get weight 0
/// (they are excluded from the loss anyway).
pub fn class_weights(policy: WeightPolicy, labels: &[u8], num_classes: usize) -> Vec<f64> {
    match policy {
        WeightPolicy::Uniform => vec![1.0; num_classes],
        WeightPolicy::InverseFrequency => {
            let mut counts = vec![0usize; num_classes];
            for &l in labels {
                if (l as usize) < num_classes {
                    counts[l as usize] += 1;
                }
            }
            counts
                .iter()
                .map(|&cnt| if cnt > 0 { labels.len() as f64 / cnt as f64 } else { 0.0 })
                .collect()
        }
    }
}

/// Class-balanced focal loss over dense logits.
///
/// For each class `n` with at least one target pixel, `l_n` is the mean
/// cross-entropy over that class's pixels; the loss is
///
/// ```text
/// L = Σ_n w_n · (1 − e^{−l_n})^γ · l_n  /  Σ_n w_n
/// ```
///
/// with both sums over present classes only — a class without pixels
/// contributes nothing and its weight leaves the normalizer. With `γ = 0`
/// and uniform weights this reduces exactly to mean per-class cross-entropy.
pub fn focal_loss<E: Element>(
    logits: &Tensor<E>,
    labels: &[u8],
    weights: &[f64],
    gamma: f64,
) -> Result<Tensor<E>> {
    if gamma < 0.0 {
        bail_config!("focusing parameter must be >= 0, got {gamma}");
    }
    if logits.rank() != 3 {
        return Err(Error::shape("focal_loss", "[classes, h, w]", logits.shape()));
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if weights.len() != c {
        return Err(Error::shape("focal_loss", c, weights.len()));
    }
    let hw = h * w;
    if labels.len() != hw {
        return Err(Error::shape("focal_loss", hw, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        bail_config!("target label {bad} out of range for {c} classes");
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        bail_config!("class weights must be finite and non-negative");
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("focal_loss on non-finite logits".into()));
    }

    let mut counts = vec![0usize; c];
    for &l in labels {
        counts[l as usize] += 1;
    }

    let logp = logits.reshape(&[c, hw])?.log_softmax(0)?;
    let mut total: Option<Tensor<E>> = None;
    let mut weight_sum = 0.0;
    for n in 0..c {
        if counts[n] == 0 {
            continue;
        }
        let inv = E::from_f64(1.0 / counts[n] as f64);
        let sel: Vec<E> = labels
            .iter()
            .map(|&l| if l as usize == n { inv } else { E::ZERO })
            .collect();
        let sel = Tensor::from_vec(sel, &[hw, 1])?;
        // Mean cross-entropy over this class's pixels. log_softmax is ≤ 0
        // entrywise, so l_n ≥ 0 and the modulation base 1 − e^{−l_n} cannot
        // go negative even in floating point.
        let l_n = logp.narrow(0, n, 1)?.matmul(&sel)?.neg();
        let modulation = l_n
            .neg()
            .exp()
            .neg()
            .add_scalar(E::ONE)
            .powf_scalar(E::from_f64(gamma))?;
        let term = modulation.mul(&l_n)?.scale(E::from_f64(weights[n]));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
        weight_sum += weights[n];
    }
    if weight_sum <= 0.0 {
        bail_config!("every present class has zero weight");
    }
    Ok(total
        .expect("at least one class is present")
        .scale(E::from_f64(1.0 / weight_sum))
        .sum_all())
}

// ── schedule ──────────────────────────────────────────────────────────────

/// Learning rate at iteration `t` (0-based): linear ramp to `lr_peak` over
/// `warmup_iters` iterations, then a step-wise cosine from `lr_peak` down to
/// exactly 0 at the final iteration.
pub fn lr_schedule(t: u64, warmup_iters: u64, total_iters: u64, lr_peak: f64) -> f64 {
    if t < warmup_iters {
        return lr_peak * (t + 1) as f64 / warmup_iters as f64;
    }
    if t >= total_iters {
        return 0.0;
    }
    let span = total_iters - warmup_iters;
    if span <= 1 {
        return 0.0;
    }
    let progress = (t - warmup_iters) as f64 / (span - 1) as f64;
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── configuration ─────────────────────────────────────────────────────────

/// Compute precision of the training loop. Checkpoint tensors are stored in
/// 32 bits either way; bit-identical resume therefore holds in `F32` mode.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_gamma() -> f64 {
    2.0
}
fn default_lr_peak() -> f64 {
    1e-3
}
fn default_warmup() -> u64 {
    100
}
fn default_epochs() -> u64 {
    50
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}
fn default_batches() -> Vec<BatchConfig> {
    vec![
        BatchConfig { b: 2, n: 1, k: 1 },
        BatchConfig { b: 2, n: 2, k: 1 },
    ]
}
fn default_num_folds() -> u32 {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Focal focusing parameter γ.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub weights: WeightPolicy,
    #[serde(default = "default_lr_peak")]
    pub lr_peak: f64,
    #[serde(default = "default_warmup")]
    pub warmup_iters: u64,
    /// One epoch is as many iterations as the dataset has images.
    #[serde(default = "default_epochs")]
    pub total_epochs: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling (0 disables clipping).
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Batch shapes; each iteration draws one uniformly.
    #[serde(default = "default_batches")]
    pub batches: Vec<BatchConfig>,
    #[serde(default)]
    pub prompt_mode: PromptMode,
    /// Cross-validation fold whose seen classes feed training.
    #[serde(default)]
    pub fold: u32,
    #[serde(default = "default_num_folds")]
    pub num_folds: u32,
    /// Optional hard stop (absolute iteration count); the schedule horizon
    /// stays `total_epochs × epoch length` regardless, so a stopped-short
    /// run and its resumption see identical learning rates.
    #[serde(default)]
    pub max_iters: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.gamma < 0.0 {
            bail_config!("gamma must be >= 0, got {}", self.gamma);
        }
        if self.warmup_iters == 0 {
            bail_config!("warmup_iters must be >= 1");
        }
        if !(self.lr_peak > 0.0) {
            bail_config!("lr_peak must be positive, got {}", self.lr_peak);
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail_config!("{name} must lie in [0, 1), got {b}");
            }
        }
        if !(self.eps > 0.0) {
            bail_config!("eps must be positive");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            bail_config!("weight_decay and clip_norm must be >= 0");
        }
        if self.total_epochs == 0 {
            bail_config!("total_epochs must be >= 1");
        }
        if self.batches.is_empty() {
            bail_config!("at least one batch configuration is required");
        }
        for b in &self.batches {
            b.validate()?;
        }
        if self.num_folds == 0 {
            bail_config!("num_folds must be >= 1");
        }
        if self.fold >= self.num_folds {
            bail_config!("fold {} out of range for {} folds", self.fold, self.num_folds);
        }
        Ok(())
    }

    /// Parse from JSON, mapping syntax and unknown-key problems to
    /// configuration errors (the message names the offending key).
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s)
            .map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override, with dotted paths into nested fields
    /// (`model.encoder.vit_layers`, `batches.0.b`). The value is parsed as
    /// JSON when possible, else taken as a string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut cur = &mut root;
        for seg in key.split('.') {
            let next = match cur {
                serde_json::Value::Object(map) => map.get_mut(seg),
                serde_json::Value::Array(items) => {
                    seg.parse::<usize>().ok().and_then(|i| items.get_mut(i))
                }
                _ => None,
            };
            cur = next.ok_or_else(|| Error::Config(format!("unknown config key \"{key}\"")))?;
        }
        *cur = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("invalid value for \"{key}\": {e}")))?;
        self.validate()
    }

    /// Hash of the resume-relevant core: everything except `max_iters`,
    /// which only decides where a run stops. A checkpoint refuses to resume
    /// under a configuration with a different core.
    pub fn stable_hash(&self) -> String {
        let mut core = self.clone();
        core.max_iters = None;
        let json = serde_json::to_string(&core).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

// ── training loop ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct TrainOpts {
    /// Zero out wall-clock columns so reruns are byte-identical.
    pub deterministic: bool,
    /// Checkpoint (`.latn` or `.json` path) to continue from.
    pub resume: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Total completed iterations (including any resumed-from prefix).
    pub iterations: u64,
    /// Losses of the iterations this call ran.
    pub losses: Vec<f64>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
}

/// Loss of one episode: encode supports into prototypes, decode the query,
/// compare against quarter-resolution nearest-downsampled labels.
pub fn episode_loss<E: Element>(
    model: &Model<E>,
    ds: &Dataset,
    ep: &Episode,
    gamma: f64,
    policy: WeightPolicy,
) -> Result<Tensor<E>> {
    let s = model.cfg.input_size();
    let support = episode_support_tensor(model, ds, ep)?;
    let assignment = episode_assignment(model, ep)?;
    let protos = model.episode_prototypes(&support, &ep.prompt_grid(), &assignment)?;
    let query = episode_image_tensor(model, ds, ep.query_image)?;
    let logits = model.query_logits(&query, &protos.prototypes)?.remove(0);

    let rec = ds.index.image(ep.query_image)?;
    let full = episode_labels(ds, ep)?;
    let canvas = labels_to_canvas(&full, rec.width as usize, rec.height as usize, s)?;
    let factor = s / model.cfg.decoder.quarter;
    let target = downsample_labels(&canvas, s, factor)?;
    let weights = class_weights(policy, &target, ep.n() + 1);
    focal_loss(&logits, &target, &weights, gamma)
}

/// Run (or continue) training, writing `metrics.csv` and epoch checkpoints
/// into `out_dir`.
pub fn train_loop(
    ds: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_loop::<f32>(ds, cfg, out_dir, opts),
        Precision::F64 => run_loop::<f64>(ds, cfg, out_dir, opts),
    }
}

fn run_loop<E: Element>(
    ds: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let epoch_len = ds.index.file.images.len() as u64;
    if epoch_len == 0 {
        bail_config!("cannot train on an empty dataset");
    }
    let pool: Vec<u32> = if cfg.num_folds <= 1 {
        ds.index.class_ids()
    } else {
        build_folds(&ds.index, cfg.num_folds as usize)?[cfg.fold as usize]
            .seen
            .clone()
    };
    if pool.is_empty() {
        bail_config!("fold {} has no seen classes to train on", cfg.fold);
    }

    let schedule_total = cfg.total_epochs * epoch_len;
    let stop_at = cfg.max_iters.unwrap_or(schedule_total);

    let mut adam = AdamW::<E>::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let (mut store, start_iter, mut last_ckpt) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::<E>::load(path)?;
            if ck.meta.config_hash != cfg.stable_hash() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained under a different configuration \
                     (its hash {}, current {})",
                    path.display(),
                    ck.meta.config_hash,
                    cfg.stable_hash()
                )));
            }
            adam.t = ck.meta.adam_t;
            adam.m = ck.adam_m;
            adam.v = ck.adam_v;
            (ck.params, ck.meta.iteration, Some(path.clone()))
        }
        None => (crate::params::ParamStore::new(), 0, None),
    };

    let metrics_path = out_dir.join("metrics.csv");
    let had_metrics = metrics_path.exists();
    let mut csv = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?,
    );
    if !had_metrics {
        writeln!(csv, "iteration,epoch,config,loss,lr,grad_norm,wall_ms")?;
    }

    let max_b = cfg.batches.iter().map(|b| b.b).max().expect("non-empty") as u64;
    let mut losses = Vec::new();

    for idx in start_iter..stop_at {
        let started = Instant::now();
        let mut rng = stream_rng(cfg.seed, Stream::TrainEpisode, idx);
        let (bcfg, mut episodes) =
            sample_episode_batch(ds, &pool, &cfg.batches, &mut rng, cfg.seed, idx * max_b)?;
        for ep in &mut episodes {
            randomize_prompt_types(ds, ep, cfg.prompt_mode, &mut rng)?;
        }

        // Rebind a fresh graph to the current parameter values (the first
        // iteration populates the store).
        let built = Model::<E>::build(cfg.model.clone(), store, cfg.seed)?;
        store = built.store.clone();
        let mut batch_loss: Option<Tensor<E>> = None;
        for ep in &episodes {
            let l = episode_loss(&built.model, ds, ep, cfg.gamma, cfg.weights)?;
            batch_loss = Some(match batch_loss {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let loss = batch_loss
            .expect("batch is non-empty")
            .scale(E::from_f64(1.0 / episodes.len() as f64));
        let loss_val = loss.item().to_f64();
        if !loss_val.is_finite() {
            let at = last_ckpt
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string());
            return Err(Error::Numeric(format!(
                "loss became non-finite at iteration {}; last good checkpoint: {at}",
                idx + 1
            )));
        }
        loss.backward()?;

        let mut grads: BTreeMap<String, Vec<E>> = BTreeMap::new();
        let mut sq_sum = 0.0f64;
        for (name, leaf) in &built.bound {
            if !leaf.requires_grad() {
                continue;
            }
            if let Some(g) = leaf.grad() {
                for v in &g {
                    let f = v.to_f64();
                    if !f.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for parameter \"{name}\" at iteration {}",
                            idx + 1
                        )));
                    }
                    sq_sum += f * f;
                }
                grads.insert(name.clone(), g);
            }
        }
        let grad_norm = sq_sum.sqrt();
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            let sc = E::from_f64(cfg.clip_norm / grad_norm);
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v = *v * sc;
                }
            }
        }

        let lr = lr_schedule(idx, cfg.warmup_iters, schedule_total, cfg.lr_peak);
        adam.step(&mut store, &grads, lr)?;

        let iteration = idx + 1;
        let epoch = idx / epoch_len + 1;
        let wall_ms = if opts.deterministic {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        writeln!(
            csv,
            "{iteration},{epoch},{},{loss_val},{lr},{grad_norm},{wall_ms}",
            bcfg.label()
        )?;
        csv.flush()?;
        losses.push(loss_val);

        if iteration % epoch_len == 0 || iteration == stop_at {
            let path = out_dir.join(format!("ckpt_{iteration:07}.latn"));
            Checkpoint {
                params: store.clone(),
                adam_m: adam.m.clone(),
                adam_v: adam.v.clone(),
                meta: CheckpointMeta {
                    format: CHECKPOINT_FORMAT.to_string(),
                    iteration,
                    epoch: iteration / epoch_len,
                    adam_t: adam.t,
                    seed_hex: format!("{:016x}", cfg.seed),
                    config_hash: cfg.stable_hash(),
                    train: cfg.clone(),
                },
            }
            .save(&path)?;
            last_ckpt = Some(path);
        }
        if !opts.quiet && (iteration % 25 == 0 || iteration == stop_at) {
            eprintln!(
                "iter {iteration}/{stop_at}  epoch {epoch}  loss {loss_val:.4}  lr {lr:.2e}  |g| {grad_norm:.3}"
            );
        }
    }

    Ok(TrainOutcome {
        iterations: stop_at.max(start_iter),
        losses,
        metrics_path,
        final_checkpoint: last_ckpt,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::synth::{synthesize_in_memory, SynthSpec};
    use crate::model::tests::tiny_config;
    use crate::tensor::gradient_check;
    use rand::Rng;

    fn rand_instance(
        classes: usize,
        h: usize,
        w: usize,
        seed: u64,
    ) -> (Tensor<f64>, Vec<u8>) {
        let mut rng = stream_rng(seed, Stream::TrainEpisode, 999);
        let logits = Tensor::from_fn(&[classes, h, w], |_| rng.gen_range(-2.0..2.0));
        let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect();
        (logits, labels)
    }

    /// Straightforward scalar evaluation of the loss formula, kept separate
    /// from the tensor implementation.
    fn scalar_oracle(logits: &Tensor<f64>, labels: &[u8], weights: &[f64], gamma: f64) -> f64 {
        let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let hw = h * w;
        let data = logits.data();
        let mut per_class_ce = vec![0.0f64; c];
        let mut counts = vec![0usize; c];
        for pix in 0..hw {
            let cls = labels[pix] as usize;
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(data[k * hw + pix]);
            }
            let mut den = 0.0;
            for k in 0..c {
                den += (data[k * hw + pix] - mx).exp();
            }
            let logp = data[cls * hw + pix] - mx - den.ln();
            per_class_ce[cls] -= logp;
            counts[cls] += 1;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for n in 0..c {
            if counts[n] == 0 {
                continue;
            }
            let l = per_class_ce[n] / counts[n] as f64;
            num += weights[n] * (1.0 - (-l).exp()).powf(gamma) * l;
            den += weights[n];
        }
        num / den
    }

    #[test]
    fn gamma_zero_uniform_is_per_class_cross_entropy() {
        for seed in 0..20 {
            let (logits, labels) = rand_instance(4, 5, 3, seed);
            let w = vec![1.0; 4];
            let got = focal_loss(&logits, &labels, &w, 0.0).unwrap().item();
            let want = scalar_oracle(&logits, &labels, &w, 0.0);
            assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn matches_scalar_formula_oracle() {
        let (logits, labels) = rand_instance(3, 4, 4, 7);
        let w = vec![1.0, 0.7, 1.3];
        let got = focal_loss(&logits, &labels, &w, 2.0).unwrap().item();
        let want = scalar_oracle(&logits, &labels, &w, 2.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let labels: Vec<u8> = vec![0, 1, 2, 1];
        let mut logits = vec![0.0f64; 3 * 4];
        for (pix, &l) in labels.iter().enumerate() {
            logits[l as usize * 4 + pix] = 30.0;
        }
        let t = Tensor::from_vec(logits, &[3, 2, 2]).unwrap();
        let loss = focal_loss(&t, &labels, &[1.0; 3], 2.0).unwrap().item();
        assert!(loss >= 0.0 && loss < 1e-6, "{loss}");
    }

    #[test]
    fn raising_correct_class_logits_never_raises_loss() {
        let (logits, labels) = rand_instance(3, 4, 4, 21);
        let hw = 16;
        let base = focal_loss(&logits, &labels, &[1.0; 3], 2.0).unwrap().item();
        for n in 0..3usize {
            let bumped: Vec<f64> = logits
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (cls, pix) = (i / hw, i % hw);
                    if cls == n && labels[pix] as usize == n {
                        v + 0.25
                    } else {
                        v
                    }
                })
                .collect();
            let t = Tensor::from_vec(bumped, logits.shape()).unwrap();
            let after = focal_loss(&t, &labels, &[1.0; 3], 2.0).unwrap().item();
            assert!(
                after <= base + 1e-12,
                "class {n}: loss rose from {base} to {after}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (logits, labels) = rand_instance(3, 3, 3, 5);
        let labels2 = labels.clone();
        let rep = gradient_check(
            "focal_loss",
            &[("logits", logits)],
            &move |ins: &[Tensor<f64>]| focal_loss(&ins[0], &labels2, &[1.0, 0.6, 1.7], 2.0),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.summary());
    }

    #[test]
    fn absent_class_is_excluded_and_weights_renormalize() {
        // No pixel of class 2: the oracle (which skips absent classes)
        // must agree, and changing the absent class's weight must not
        // matter.
        let (logits, mut labels) = rand_instance(3, 4, 4, 11);
        for l in labels.iter_mut() {
            if *l == 2 {
                *l = 0;
            }
        }
        let a = focal_loss(&logits, &labels, &[1.0, 2.0, 5.0], 1.5).unwrap().item();
        let b = focal_loss(&logits, &labels, &[1.0, 2.0, 0.0], 1.5).unwrap().item();
        let want = scalar_oracle(&logits, &labels, &[1.0, 2.0, 123.0], 1.5);
        assert_eq!(a, b);
        assert!((a - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let (logits, labels) = rand_instance(3, 2, 2, 1);
        assert!(focal_loss(&logits, &labels, &[1.0; 3], -0.5).is_err());
        assert!(focal_loss(&logits, &labels, &[1.0; 2], 2.0).is_err());
        assert!(focal_loss(&logits, &labels[..3], &[1.0; 3], 2.0).is_err());
        let bad = vec![9u8; 4];
        assert!(focal_loss(&logits, &bad, &[1.0; 3], 2.0).is_err());
    }

    #[test]
    fn inverse_frequency_weights() {
        let labels = vec![0, 0, 0, 1];
        let w = class_weights(WeightPolicy::InverseFrequency, &labels, 3);
        assert_eq!(w, vec![4.0 / 3.0, 4.0, 0.0]);
        assert_eq!(class_weights(WeightPolicy::Uniform, &labels, 3), vec![1.0; 3]);
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        let (warmup, total, peak) = (100u64, 1101u64, 2e-3);
        assert_eq!(lr_schedule(0, warmup, total, peak), peak / 100.0);
        assert_eq!(lr_schedule(warmup - 1, warmup, total, peak), peak);
        // first decay step continues smoothly from the peak
        let jump = (lr_schedule(warmup, warmup, total, peak) - peak).abs();
        assert!(jump <= peak / warmup as f64, "{jump}");
        // midpoint of the decay span
        let mid = warmup + (total - warmup - 1) / 2;
        let lr_mid = lr_schedule(mid, warmup, total, peak);
        assert!((lr_mid - peak / 2.0).abs() < 1e-12, "{lr_mid}");
        assert_eq!(lr_schedule(total - 1, warmup, total, peak), 0.0);
        assert_eq!(lr_schedule(total + 5, warmup, total, peak), 0.0);
        // monotone through the decay
        let mut prev = peak;
        for t in warmup..total {
            let lr = lr_schedule(t, warmup, total, peak);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    pub(crate) fn tiny_train_config() -> TrainConfig {
        // Episode prompt sampling draws up to the dataset-side point budget,
        // so the model must accept that many.
        let mut model = tiny_config();
        model.prompt.max_points = crate::data::MAX_POINTS;
        TrainConfig {
            model,
            gamma: 2.0,
            weights: WeightPolicy::Uniform,
            lr_peak: 3e-3,
            warmup_iters: 10,
            total_epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 3,
            precision: Precision::F32,
            batches: vec![BatchConfig { b: 1, n: 1, k: 1 }],
            prompt_mode: PromptMode::Random,
            fold: 0,
            num_folds: 1,
            max_iters: None,
        }
    }

    pub(crate) fn tiny_dataset() -> Dataset {
        synthesize_in_memory(&SynthSpec {
            classes: 4,
            images: 12,
            size: 32,
            min_shapes: 1,
            max_shapes: 2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn config_parsing_names_unknown_keys_and_fills_defaults() {
        let model = serde_json::to_string(&tiny_config()).unwrap();
        let cfg = TrainConfig::from_json(&format!("{{\"model\": {model}}}")).unwrap();
        assert_eq!(cfg.gamma, 2.0);
        assert_eq!(cfg.warmup_iters, 100);
        assert_eq!(cfg.weights, WeightPolicy::Uniform);
        assert_eq!(cfg.precision, Precision::F32);

        let err = TrainConfig::from_json(&format!("{{\"model\": {model}, \"lr_peek\": 1.0}}"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("lr_peek"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = tiny_train_config();
        cfg.apply_override("lr_peak", "0.005").unwrap();
        assert_eq!(cfg.lr_peak, 0.005);
        cfg.apply_override("batches.0.b", "2").unwrap();
        assert_eq!(cfg.batches[0].b, 2);
        cfg.apply_override("prompt_mode", "\"masks_only\"").unwrap();
        assert_eq!(cfg.prompt_mode, PromptMode::MasksOnly);
        assert!(cfg.apply_override("no_such_key", "1").is_err());
        assert!(cfg.apply_override("gamma", "-1.0").is_err(), "must revalidate");
    }

    #[test]
    fn stable_hash_ignores_stop_point_only() {
        let mut a = tiny_train_config();
        let mut b = tiny_train_config();
        b.max_iters = Some(30);
        assert_eq!(a.stable_hash(), b.stable_hash());
        a.lr_peak *= 2.0;
        assert_ne!(a.stable_hash(), b.stable_hash());
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config();
        let built = Model::<f32>::build(cfg.model.clone(), crate::params::ParamStore::new(), 9)
            .unwrap();
        let mut adam = AdamW::<f32>::new(0.9, 0.999, 1e-8, 0.01);
        let mut store = built.store;
        // one step with synthetic gradients to populate the moments
        let grads: BTreeMap<String, Vec<f32>> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.clone(), vec![0.01; p.data.len()]))
            .collect();
        adam.step(&mut store, &grads, 1e-3).unwrap();

        let path = dir.path().join("ck.latn");
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            iteration: 17,
            epoch: 1,
            adam_t: adam.t,
            seed_hex: format!("{:016x}", cfg.seed),
            config_hash: cfg.stable_hash(),
            train: cfg,
        };
        Checkpoint {
            params: store.clone(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            meta: meta.clone(),
        }
        .save(&path)
        .unwrap();

        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back.meta, meta);
        for (orig, loaded) in [
            (&store, &back.params),
            (&adam.m, &back.adam_m),
            (&adam.v, &back.adam_v),
        ] {
            assert_eq!(orig.len(), loaded.len());
            for (name, p) in orig.iter() {
                let q = loaded.get(name).unwrap();
                assert_eq!(p.shape, q.shape, "{name}");
                for (a, b) in p.data.iter().zip(q.data.iter()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{name}");
                }
            }
        }
        // loading via the sidecar path works too
        assert!(Checkpoint::<f32>::load(&path.with_extension("json")).is_ok());
    }

    #[test]
    fn smoke_iteration_writes_csv_and_checkpoint() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config();
        cfg.max_iters = Some(1);
        let out = train_loop(
            &ds,
            &cfg,
            dir.path(),
            &TrainOpts {
                deterministic: true,
                quiet: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.losses.len(), 1);
        assert!(out.losses[0].is_finite());
        let csv = std::fs::read_to_string(&out.metrics_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "iteration,epoch,config,loss,lr,grad_norm,wall_ms");
        assert!(lines[1].starts_with("1,1,1x1x1,"));
        assert!(lines[1].ends_with(",0"), "deterministic wall_ms: {}", lines[1]);
        let ckpt = out.final_checkpoint.unwrap();
        assert!(ckpt.exists());
        assert!(ckpt.with_extension("json").exists());
        let saved = Checkpoint::<f32>::load(&ckpt).unwrap();
        assert!(
            saved.params.trainable_elements() > 0,
            "checkpoints must carry the trained parameters"
        );
        // moments exist for every parameter that has received a gradient
        assert!(saved.adam_m.len() > 0 && saved.adam_m.len() <= saved.params.len());
        assert_eq!(saved.adam_m.len(), saved.adam_v.len());
    }

    #[test]
    fn resume_replays_the_uninterrupted_run_bitwise() {
        let ds = tiny_dataset();
        let opts = TrainOpts {
            deterministic: true,
            quiet: true,
            ..Default::default()
        };

        // straight run: 9 iterations
        let full_dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config();
        cfg.max_iters = Some(9);
        let full = train_loop(&ds, &cfg, full_dir.path(), &opts).unwrap();

        // split run: 6, checkpoint, then 3 more into the same directory
        let split_dir = tempfile::tempdir().unwrap();
        let mut first = tiny_train_config();
        first.max_iters = Some(6);
        let part = train_loop(&ds, &first, split_dir.path(), &opts).unwrap();
        let mut second = tiny_train_config();
        second.max_iters = Some(9);
        let resumed = train_loop(
            &ds,
            &second,
            split_dir.path(),
            &TrainOpts {
                deterministic: true,
                quiet: true,
                resume: part.final_checkpoint.clone(),
            },
        )
        .unwrap();
        assert_eq!(resumed.iterations, 9);
        assert_eq!(resumed.losses.len(), 3);

        let a = std::fs::read(&full.metrics_path).unwrap();
        let b = std::fs::read(&resumed.metrics_path).unwrap();
        assert_eq!(a, b, "metrics must be bit-identical");

        let ck_a = std::fs::read(full.final_checkpoint.unwrap()).unwrap();
        let ck_b = std::fs::read(resumed.final_checkpoint.unwrap()).unwrap();
        assert_eq!(ck_a, ck_b, "final checkpoints must be bit-identical");
    }

    #[test]
    fn resume_rejects_a_different_configuration() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config();
        cfg.max_iters = Some(2);
        let opts = TrainOpts {
            deterministic: true,
            quiet: true,
            ..Default::default()
        };
        let out = train_loop(&ds, &cfg, dir.path(), &opts).unwrap();
        let mut changed = cfg.clone();
        changed.lr_peak *= 10.0;
        changed.max_iters = Some(4);
        let err = train_loop(
            &ds,
            &changed,
            dir.path(),
            &TrainOpts {
                deterministic: true,
                quiet: true,
                resume: out.final_checkpoint,
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("different configuration"), "{err}");
    }

    #[test]
    fn loss_trends_down_over_twohundred_iterations() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config();
        cfg.max_iters = Some(200);
        cfg.prompt_mode = PromptMode::MasksOnly;
        let out = train_loop(
            &ds,
            &cfg,
            dir.path(),
            &TrainOpts {
                deterministic: true,
                quiet: true,
                ..Default::default()
            },
        )
        .unwrap();
        let first: f64 = out.losses[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = out.losses[150..].iter().sum::<f64>() / 50.0;
        eprintln!("loss trend over 200 iterations: {first:.4} -> {last:.4}");
        assert!(
            last < first,
            "50-iteration moving average should fall: {first} -> {last}"
        );
    }
}
