//! Benchmarking: foreground mean-IoU over randomized episode suites,
//! multi-seed aggregation, cross-validation over class folds, and ablation
//! sweeps.
//!
//! The IoU convention treats every cross-class confusion as a false
//! positive for the predicted class and a false negative for the true one;
//! background never enters the class mean, and a class absent from both
//! prediction and ground truth is excluded from that episode's mean rather
//! than scored as a freebie.

use crate::data::{
    build_folds, episode_labels, randomize_prompt_types, sample_episode, swap_episode_classes,
    Dataset, DatasetIndex, Episode, PromptMode,
};
use crate::model::{episode_predict, Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{no_grad, Element};
use crate::train::{train_loop, Checkpoint, TrainConfig, TrainOpts};
use crate::{bail_config, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ── IoU ───────────────────────────────────────────────────────────────────

/// Intersection-over-union of one class between two label maps, counting
/// cross-class confusions as false positives/negatives for the classes
/// involved. Returns `None` when the class appears in neither map (such a
/// class is excluded from averages rather than scored).
pub fn compute_iou(pred: &[u8], gt: &[u8], class: u8) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("compute_iou", gt.len(), pred.len()));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let union = tp + fp + fneg;
    Ok((union > 0).then(|| tp as f64 / union as f64))
}

/// Map a square-canvas prediction back onto the original image grid,
/// inverting the aspect-preserving top-left placement used on the way in.
pub fn canvas_to_labels(canvas: &[u8], side: usize, width: usize, height: usize) -> Result<Vec<u8>> {
    if canvas.len() != side * side {
        return Err(Error::shape("canvas_to_labels", side * side, canvas.len()));
    }
    if width == side && height == side {
        return Ok(canvas.to_vec());
    }
    let scale = (side as f64 / width as f64).min(side as f64 / height as f64);
    let rw = ((width as f64 * scale).round() as usize).clamp(1, side);
    let rh = ((height as f64 * scale).round() as usize).clamp(1, side);
    let mut out = vec![0u8; width * height];
    for y in 0..height {
        let sy = (((y as f64 + 0.5) * rh as f64 / height as f64) as usize).min(rh - 1);
        for x in 0..width {
            let sx = (((x as f64 + 0.5) * rw as f64 / width as f64) as usize).min(rw - 1);
            out[y * width + x] = canvas[sy * side + sx];
        }
    }
    Ok(out)
}

// ── segmenters ────────────────────────────────────────────────────────────

/// Anything that maps an episode to a dense label map over the query image
/// (episode-local labels: 0 background, i+1 for `class_ids[i]`).
pub trait Segmenter {
    fn segment(&self, ds: &Dataset, ep: &Episode) -> Result<Vec<u8>>;
    fn name(&self) -> String;
}

/// Upper baseline: returns the ground truth.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn segment(&self, ds: &Dataset, ep: &Episode) -> Result<Vec<u8>> {
        episode_labels(ds, ep)
    }
    fn name(&self) -> String {
        "oracle".into()
    }
}

/// Lower baseline: predicts background everywhere.
pub struct ConstantBackground;

impl Segmenter for ConstantBackground {
    fn segment(&self, ds: &Dataset, ep: &Episode) -> Result<Vec<u8>> {
        let rec = ds.index.image(ep.query_image)?;
        Ok(vec![0u8; rec.width as usize * rec.height as usize])
    }
    fn name(&self) -> String {
        "constant-bg".into()
    }
}

/// The trained model behind the [`Segmenter`] interface: rebuilds the
/// forward graph over a frozen parameter snapshot per episode and resamples
/// the canvas prediction back to image resolution.
pub struct NeuralSegmenter<E: Element> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub seed: u64,
    pub per_example: bool,
    label: String,
}

impl<E: Element> NeuralSegmenter<E> {
    pub fn new(cfg: ModelConfig, store: ParamStore<E>, seed: u64, per_example: bool) -> Self {
        NeuralSegmenter {
            cfg,
            store,
            seed,
            per_example,
            label: "neural".into(),
        }
    }

    /// Load parameters and architecture from a training checkpoint.
    pub fn from_checkpoint(path: &Path, per_example: bool) -> Result<Self> {
        let ck = Checkpoint::<E>::load(path)?;
        let mut s = Self::new(
            ck.meta.train.model.clone(),
            ck.params,
            ck.meta.train.seed,
            per_example,
        );
        s.label = format!("neural ({})", path.display());
        Ok(s)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.total_elements()
    }
}

impl<E: Element> Segmenter for NeuralSegmenter<E> {
    fn segment(&self, ds: &Dataset, ep: &Episode) -> Result<Vec<u8>> {
        no_grad(|| {
            let built = Model::<E>::build(self.cfg.clone(), self.store.clone(), self.seed)?;
            let canvas = episode_predict(&built.model, ds, ep, self.per_example)?;
            let rec = ds.index.image(ep.query_image)?;
            canvas_to_labels(
                &canvas,
                self.cfg.input_size(),
                rec.width as usize,
                rec.height as usize,
            )
        })
    }
    fn name(&self) -> String {
        self.label.clone()
    }
}

// ── protocol & report ─────────────────────────────────────────────────────

/// Which side of the fold's class split feeds evaluation episodes.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Classes held out from training — the generalization measurement.
    #[default]
    Unseen,
    /// Training classes (sanity checks and N-way sweeps past the unseen
    /// class count).
    Seen,
    /// Everything.
    All,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unseen" => Ok(EvalSplit::Unseen),
            "seen" => Ok(EvalSplit::Seen),
            "all" => Ok(EvalSplit::All),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalProtocol {
    pub episodes_per_run: usize,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub k: usize,
    pub prompts: PromptMode,
    /// Fold whose split applies; `None` evaluates over all classes.
    pub fold: Option<u32>,
    pub num_folds: u32,
    pub split: EvalSplit,
    /// Fuse per-example masks via their maximum instead of averaging
    /// prototypes first.
    pub per_example: bool,
    /// Control arm: swap every episode's support classes for different ones
    /// so the prototypes mismatch the query; scores should collapse.
    pub control: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            episodes_per_run: 200,
            seeds: vec![0, 1, 2],
            n: 1,
            k: 1,
            prompts: PromptMode::MasksOnly,
            fold: None,
            num_folds: 4,
            split: EvalSplit::Unseen,
            per_example: false,
            control: false,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_run == 0 {
            bail_config!("episodes_per_run must be >= 1");
        }
        if self.seeds.is_empty() {
            bail_config!("at least one evaluation seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail_config!("evaluation seeds must be distinct");
        }
        if self.n == 0 || self.k == 0 {
            bail_config!("n and k must be >= 1");
        }
        if let Some(f) = self.fold {
            if self.num_folds == 0 || f >= self.num_folds {
                bail_config!("fold {f} out of range for {} folds", self.num_folds);
            }
        }
        Ok(())
    }

    /// The class pool this protocol draws episodes from.
    pub fn class_pool(&self, ds: &Dataset) -> Result<Vec<u32>> {
        let pool = match self.fold {
            None => ds.index.class_ids(),
            Some(f) => {
                let folds = build_folds(&ds.index, self.num_folds as usize)?;
                let fold = &folds[f as usize];
                match self.split {
                    EvalSplit::Unseen => fold.unseen.clone(),
                    EvalSplit::Seen => fold.seen.clone(),
                    EvalSplit::All => ds.index.class_ids(),
                }
            }
        };
        let eligible = ds.index.eligible_classes(&pool, self.k);
        if eligible.len() < self.n {
            return Err(Error::Config(format!(
                "protocol needs {} classes with at least {} support images each, \
                 but the pool has only {}",
                self.n,
                self.k + 1,
                eligible.len()
            )));
        }
        Ok(pool)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
    /// Episodes that contributed at least one scorable class.
    pub episodes_scored: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassIoU {
    pub class_id: u32,
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
    /// `None` when the class never appeared in prediction or truth.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkReport {
    pub model: String,
    pub protocol: EvalProtocol,
    pub per_seed: Vec<SeedResult>,
    pub mean_miou: f64,
    pub per_class: Vec<ClassIoU>,
}

impl BenchmarkReport {
    /// Per-seed rows plus the aggregate, as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,miou,episodes_scored\n");
        for r in &self.per_seed {
            let _ = writeln!(out, "{},{},{}", r.seed, r.miou, r.episodes_scored);
        }
        let scored: usize = self.per_seed.iter().map(|r| r.episodes_scored).sum();
        let _ = writeln!(out, "mean,{},{}", self.mean_miou, scored);
        out
    }

    /// Aggregate per-class counts, as CSV.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class_id,name,tp,fp,fn,iou\n");
        for c in &self.per_class {
            let iou = c.iou.map_or(String::from(""), |v| v.to_string());
            let _ = writeln!(out, "{},{},{},{},{},{iou}", c.class_id, c.name, c.tp, c.fp, c.fneg);
        }
        out
    }

    pub fn render_table(&self) -> String {
        let p = &self.protocol;
        let mut out = String::new();
        let _ = writeln!(out, "model     : {}", self.model);
        let _ = writeln!(
            out,
            "protocol  : {}-way {}-shot, {} episodes x {} seeds, prompts {:?}, split {:?}{}{}",
            p.n,
            p.k,
            p.episodes_per_run,
            p.seeds.len(),
            p.prompts,
            p.split,
            p.fold.map_or(String::new(), |f| format!(", fold {f}")),
            if p.control { ", CONTROL (swapped classes)" } else { "" },
        );
        let _ = writeln!(out, "{:>6}  {:>8}  {:>8}", "seed", "mIoU", "episodes");
        for r in &self.per_seed {
            let _ = writeln!(out, "{:>6}  {:>8.4}  {:>8}", r.seed, r.miou, r.episodes_scored);
        }
        let _ = writeln!(out, "{:>6}  {:>8.4}", "mean", self.mean_miou);
        let _ = writeln!(out, "per-class IoU:");
        let _ = writeln!(
            out,
            "{:>6}  {:<12} {:>8}  {:>9} {:>9} {:>9}",
            "class", "name", "IoU", "TP", "FP", "FN"
        );
        for c in &self.per_class {
            let iou = c.iou.map_or(String::from("absent"), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:>6}  {:<12} {:>8}  {:>9} {:>9} {:>9}",
                c.class_id, c.name, iou, c.tp, c.fp, c.fneg
            );
        }
        out
    }
}

// ── benchmark ─────────────────────────────────────────────────────────────

/// Evaluate a segmenter over the protocol's episode suites — one suite per
/// seed, episodes drawn from per-index streams so runs with equal inputs
/// produce byte-identical reports.
/// Scores from one evaluation episode: mean foreground IoU over the slots
/// whose union was nonempty, plus raw pixel counts keyed by dataset class id.
struct EpisodeScore {
    /// `(class_id, tp, fp, fneg)` per episode slot, in slot order.
    class_counts: Vec<(u32, u64, u64, u64)>,
    /// `None` when every slot had an empty union.
    miou: Option<f64>,
}

/// Samples and scores episode `i` of `seed`. Stateless: the result depends
/// only on `(seed, i, protocol, dataset, segmenter)`, which is what makes
/// order-independent parallel evaluation safe.
fn score_episode(
    seg: &dyn Segmenter,
    ds: &Dataset,
    pool: &[u32],
    protocol: &EvalProtocol,
    seed: u64,
    i: u64,
) -> Result<EpisodeScore> {
    let mut rng = stream_rng(seed, Stream::EvalEpisode, i);
    let mut ep = sample_episode(ds, pool, protocol.n, protocol.k, &mut rng, seed, i)?;
    if protocol.control {
        ep = swap_episode_classes(ds, &ep, pool, protocol.k, &mut rng)?;
    }
    randomize_prompt_types(ds, &mut ep, protocol.prompts, &mut rng)?;

    let pred = seg.segment(ds, &ep)?;
    let gt = episode_labels(ds, &ep)?;
    let mut ep_sum = 0.0;
    let mut ep_classes = 0usize;
    let mut class_counts = Vec::with_capacity(ep.class_ids.len());
    for (slot, &cls) in ep.class_ids.iter().enumerate() {
        let label = (slot + 1) as u8;
        if let Some(iou) = compute_iou(&pred, &gt, label)? {
            ep_sum += iou;
            ep_classes += 1;
        }
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.iter().zip(&gt) {
            match (p == label, g == label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        class_counts.push((cls, tp, fp, fneg));
    }
    Ok(EpisodeScore {
        class_counts,
        miou: (ep_classes > 0).then(|| ep_sum / ep_classes as f64),
    })
}

/// Folds ordered per-episode scores into a report. The reduction order is
/// fixed by `(seed, episode, slot)`, so the report is identical no matter
/// how the scores were produced.
fn aggregate(
    model: String,
    protocol: &EvalProtocol,
    index: &DatasetIndex,
    scores: &[Vec<EpisodeScore>],
) -> BenchmarkReport {
    let mut per_seed = Vec::with_capacity(protocol.seeds.len());
    let mut counts: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
    for (&seed, row) in protocol.seeds.iter().zip(scores) {
        let mut sum = 0.0;
        let mut scored = 0usize;
        for score in row {
            if let Some(m) = score.miou {
                sum += m;
                scored += 1;
            }
            for &(cls, tp, fp, fneg) in &score.class_counts {
                let e = counts.entry(cls).or_insert((0, 0, 0));
                e.0 += tp;
                e.1 += fp;
                e.2 += fneg;
            }
        }
        let miou = if scored > 0 { sum / scored as f64 } else { 0.0 };
        per_seed.push(SeedResult {
            seed,
            miou,
            episodes_scored: scored,
        });
    }
    let mean_miou = per_seed.iter().map(|r| r.miou).sum::<f64>() / per_seed.len() as f64;

    let per_class = counts
        .into_iter()
        .map(|(id, (tp, fp, fneg))| {
            let union = tp + fp + fneg;
            ClassIoU {
                class_id: id,
                name: index
                    .file
                    .classes
                    .iter()
                    .find(|c| c.id == id)
                    .map_or_else(|| format!("class{id}"), |c| c.name.clone()),
                tp,
                fp,
                fneg,
                iou: (union > 0).then(|| tp as f64 / union as f64),
            }
        })
        .collect();

    BenchmarkReport {
        model,
        protocol: protocol.clone(),
        per_seed,
        mean_miou,
        per_class,
    }
}

pub fn run_benchmark(
    seg: &dyn Segmenter,
    ds: &Dataset,
    protocol: &EvalProtocol,
) -> Result<BenchmarkReport> {
    protocol.validate()?;
    let pool = protocol.class_pool(ds)?;

    let mut scores = Vec::with_capacity(protocol.seeds.len());
    for &seed in &protocol.seeds {
        let mut row = Vec::with_capacity(protocol.episodes_per_run);
        for i in 0..protocol.episodes_per_run {
            row.push(score_episode(seg, ds, &pool, protocol, seed, i as u64)?);
        }
        scores.push(row);
    }
    Ok(aggregate(seg.name(), protocol, &ds.index, &scores))
}

/// `run_benchmark` spread over `workers` threads. Each worker opens its own
/// view of the dataset from the shared index; episodes are scored in a
/// strided schedule and reduced in episode order, so the report is
/// byte-identical to the sequential run for any worker count.
pub fn run_benchmark_parallel(
    seg: &(dyn Segmenter + Sync),
    index: &DatasetIndex,
    protocol: &EvalProtocol,
    workers: usize,
) -> Result<BenchmarkReport> {
    protocol.validate()?;
    let pool = protocol.class_pool(&Dataset::from_index(index.clone()))?;

    let jobs: Vec<(usize, u64, u64)> = protocol
        .seeds
        .iter()
        .enumerate()
        .flat_map(|(si, &seed)| {
            (0..protocol.episodes_per_run as u64).map(move |i| (si, seed, i))
        })
        .collect();
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers <= 1 {
        let ds = Dataset::from_index(index.clone());
        return run_benchmark(seg, &ds, protocol);
    }

    let mut slots: Vec<Option<Result<EpisodeScore>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);
    let chunks = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                let pool = &pool;
                scope.spawn(move || -> Vec<(usize, Result<EpisodeScore>)> {
                    let ds = Dataset::from_index(index.clone());
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(j, &(_, seed, i))| {
                            (j, score_episode(seg, &ds, pool, protocol, seed, i))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Vec<_>>()
    });
    for chunk in chunks {
        for (j, res) in chunk {
            slots[j] = Some(res);
        }
    }

    let mut scores: Vec<Vec<EpisodeScore>> = protocol
        .seeds
        .iter()
        .map(|_| Vec::with_capacity(protocol.episodes_per_run))
        .collect();
    for ((si, _, _), slot) in jobs.iter().zip(slots) {
        let score = slot.expect("episode left unscored")?;
        scores[*si].push(score);
    }
    Ok(aggregate(seg.name(), protocol, index, &scores))
}

// ── cross-validation ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CrossValReport {
    pub folds: Vec<BenchmarkReport>,
    pub grand_mean: f64,
}

impl CrossValReport {
    pub fn render_table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for r in &self.folds {
            let f = r.protocol.fold.expect("cross-validation reports carry folds");
            let _ = write!(header, "{:>8}", format!("fold-{f}"));
            let _ = write!(row, "{:>8.4}", r.mean_miou);
        }
        format!("{header}{:>8}\n{row}{:>8.4}\n", "mean", self.grand_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,miou\n");
        for r in &self.folds {
            let _ = writeln!(
                out,
                "{},{}",
                r.protocol.fold.expect("cross-validation reports carry folds"),
                r.mean_miou
            );
        }
        let _ = writeln!(out, "mean,{}", self.grand_mean);
        out
    }
}

/// Evaluate one segmenter per fold on that fold's held-out classes. The
/// factory maps a fold id to its segmenter (typically by loading the fold's
/// checkpoint; a missing one is its error to report).
pub fn cross_validate(
    ds: &Dataset,
    protocol: &EvalProtocol,
    factory: &mut dyn FnMut(u32) -> Result<Box<dyn Segmenter>>,
) -> Result<CrossValReport> {
    if protocol.num_folds == 0 {
        bail_config!("cross-validation needs at least one fold");
    }
    let mut folds = Vec::new();
    for f in 0..protocol.num_folds {
        let seg = factory(f)?;
        let mut p = protocol.clone();
        p.fold = Some(f);
        p.split = EvalSplit::Unseen;
        folds.push(run_benchmark(seg.as_ref(), ds, &p)?);
    }
    let grand_mean = folds.iter().map(|r| r.mean_miou).sum::<f64>() / folds.len() as f64;
    Ok(CrossValReport { folds, grand_mean })
}

// ── ablations ─────────────────────────────────────────────────────────────

/// Config switches the sweep knows how to toggle.
pub const ABLATION_AXES: &[&str] = &["spatial_convs", "mixer", "token_pool", "prompt_mode"];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub mean_miou: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let mut out = format!("{:<28} {:>10} {:>8}\n", "variant", "params", "mIoU");
        for r in &self.rows {
            let _ = writeln!(out, "{:<28} {:>10} {:>8.4}", r.variant, r.parameters, r.mean_miou);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,parameters,miou\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.variant, r.parameters, r.mean_miou);
        }
        out
    }
}

/// Apply one ablation axis to a training configuration. Architectural axes
/// flip a switch off; `prompt_mode` is evaluation-time only and leaves the
/// config untouched (callers evaluate the baseline under each prompt mode).
pub fn apply_ablation(cfg: &mut TrainConfig, axis: &str) -> Result<String> {
    match axis {
        "spatial_convs" => {
            cfg.model.decoder.spatial_convs = false;
            Ok("w/o spatial convolutions".into())
        }
        "mixer" => {
            cfg.model.prompt.mixer = false;
            Ok("w/o class-example mixer".into())
        }
        "token_pool" => {
            cfg.model.prompt.token_pool = false;
            Ok("w/o token pool".into())
        }
        "prompt_mode" => Ok("prompt modes".into()),
        other => Err(Error::Config(format!(
            "unknown ablation axis '{other}' (known: {})",
            ABLATION_AXES.join(", ")
        ))),
    }
}

/// Train and evaluate the baseline and one variant per axis, reusing the
/// baseline model for evaluation-only axes (prompt modes).
pub fn ablation_sweep(
    ds: &Dataset,
    base: &TrainConfig,
    axes: &[String],
    protocol: &EvalProtocol,
    out_dir: &Path,
) -> Result<AblationReport> {
    protocol.validate()?;
    for axis in axes {
        // validate before spending any training time
        apply_ablation(&mut base.clone(), axis)?;
    }

    let opts = TrainOpts {
        deterministic: true,
        quiet: true,
        ..Default::default()
    };
    let train_variant = |cfg: &TrainConfig, dir: &Path| -> Result<(PathBuf, usize)> {
        let out = train_loop(ds, cfg, dir, &opts)?;
        let ckpt = out
            .final_checkpoint
            .ok_or_else(|| Error::Config("ablation training produced no checkpoint".into()))?;
        let seg = NeuralSegmenter::<f32>::from_checkpoint(&ckpt, protocol.per_example)?;
        Ok((ckpt, seg.parameter_count()))
    };

    let mut rows = Vec::new();
    let (base_ckpt, base_params) = train_variant(base, &out_dir.join("baseline"))?;
    let eval_at = |ckpt: &Path, protocol: &EvalProtocol| -> Result<(f64, Vec<f64>)> {
        let seg = NeuralSegmenter::<f32>::from_checkpoint(ckpt, protocol.per_example)?;
        let rep = run_benchmark(&seg, ds, protocol)?;
        Ok((rep.mean_miou, rep.per_seed.iter().map(|r| r.miou).collect()))
    };
    let (miou, per_seed) = eval_at(&base_ckpt, protocol)?;
    rows.push(AblationRow {
        variant: "baseline".into(),
        parameters: base_params,
        mean_miou: miou,
        per_seed,
    });

    for axis in axes {
        if axis == "prompt_mode" {
            for (mode, label) in [
                (PromptMode::MasksOnly, "baseline, masks only"),
                (PromptMode::PointsOnly, "baseline, points only"),
            ] {
                let mut p = protocol.clone();
                p.prompts = mode;
                let (miou, per_seed) = eval_at(&base_ckpt, &p)?;
                rows.push(AblationRow {
                    variant: label.into(),
                    parameters: base_params,
                    mean_miou: miou,
                    per_seed,
                });
            }
            continue;
        }
        let mut cfg = base.clone();
        let label = apply_ablation(&mut cfg, axis)?;
        let (ckpt, params) = train_variant(&cfg, &out_dir.join(axis))?;
        let (miou, per_seed) = eval_at(&ckpt, protocol)?;
        rows.push(AblationRow {
            variant: label,
            parameters: params,
            mean_miou: miou,
            per_seed,
        });
    }
    Ok(AblationReport { rows })
}
