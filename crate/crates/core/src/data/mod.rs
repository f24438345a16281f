//! Dataset index, N-way K-shot episode sampling, and prompt materialization.
//!
//! The on-disk format is a directory with `index.json` plus PNG images and
//! per-instance binary masks:
//!
//! ```json
//! {
//!   "images":      [{"id": 0, "path": "images/img_00000.png", "width": 64, "height": 64}],
//!   "annotations": [{"image_id": 0, "class_id": 3, "mask_path": "masks/img_00000_cls3.png"}],
//!   "classes":     [{"id": 3, "name": "ring"}]
//! }
//! ```
//!
//! Masks are 8-bit PNGs with values 0/255 at image resolution; prompts made
//! from them are rescaled to the fixed 256×256 prompt-mask resolution.

pub mod synth;

use crate::prompt::{PromptAnnotation, MASK_RES};
use crate::tensor::Tensor;
use crate::{bail_config, Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

// ── index types ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub id: u32,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: u32,
    pub class_id: u32,
    pub mask_path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassRecord {
    pub id: u32,
    pub name: String,
}

/// The `index.json` payload.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct IndexFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub classes: Vec<ClassRecord>,
}

/// An index plus its class split. Freshly loaded datasets treat every class
/// as seen; [`build_folds`] produces the cross-validation splits.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub file: IndexFile,
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub fold: Option<u32>,
    images_by_class: BTreeMap<u32, Vec<u32>>,
    classes_by_image: BTreeMap<u32, Vec<u32>>,
}

impl DatasetIndex {
    pub fn from_file(root: impl Into<PathBuf>, file: IndexFile) -> Result<Self> {
        let mut images_by_class: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut classes_by_image: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let image_ids: BTreeMap<u32, ()> = file.images.iter().map(|i| (i.id, ())).collect();
        if image_ids.len() != file.images.len() {
            bail_config!("dataset index repeats an image id");
        }
        let class_ids: BTreeMap<u32, ()> = file.classes.iter().map(|c| (c.id, ())).collect();
        if class_ids.len() != file.classes.len() {
            bail_config!("dataset index repeats a class id");
        }
        let mut seen_pairs = BTreeMap::new();
        for ann in &file.annotations {
            if !image_ids.contains_key(&ann.image_id) {
                bail_config!("annotation references unknown image {}", ann.image_id);
            }
            if !class_ids.contains_key(&ann.class_id) {
                bail_config!("annotation references unknown class {}", ann.class_id);
            }
            if seen_pairs.insert((ann.image_id, ann.class_id), ()).is_some() {
                bail_config!(
                    "duplicate annotation for image {} class {}",
                    ann.image_id,
                    ann.class_id
                );
            }
            images_by_class.entry(ann.class_id).or_default().push(ann.image_id);
            classes_by_image.entry(ann.image_id).or_default().push(ann.class_id);
        }
        for v in images_by_class.values_mut() {
            v.sort_unstable();
        }
        for v in classes_by_image.values_mut() {
            v.sort_unstable();
        }
        let seen = class_ids.keys().copied().collect();
        Ok(DatasetIndex {
            root: root.into(),
            file,
            seen,
            unseen: Vec::new(),
            fold: None,
            images_by_class,
            classes_by_image,
        })
    }

    /// Load `dir/index.json`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bytes = std::fs::read(dir.join("index.json"))?;
        let file: IndexFile = serde_json::from_slice(&bytes)?;
        Self::from_file(dir, file)
    }

    /// Write `dir/index.json` (stable field order, deterministic bytes).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.file)?;
        std::fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    /// SHA-256 of the canonical index JSON.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(&self.file).expect("index serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.file.classes.iter().map(|c| c.id).collect()
    }

    pub fn image(&self, id: u32) -> Result<&ImageRecord> {
        self.file
            .images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Config(format!("unknown image id {id}")))
    }

    pub fn annotation(&self, image_id: u32, class_id: u32) -> Result<&AnnotationRecord> {
        self.file
            .annotations
            .iter()
            .find(|a| a.image_id == image_id && a.class_id == class_id)
            .ok_or_else(|| {
                Error::Config(format!("no annotation for image {image_id} class {class_id}"))
            })
    }

    pub fn images_with_class(&self, class_id: u32) -> &[u32] {
        self.images_by_class
            .get(&class_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn classes_in_image(&self, image_id: u32) -> &[u32] {
        self.classes_by_image
            .get(&image_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Classes from `pool` with at least `k + 1` annotated images (K support
    /// images plus a distinct query).
    pub fn eligible_classes(&self, pool: &[u32], k: usize) -> Vec<u32> {
        pool.iter()
            .copied()
            .filter(|c| self.images_with_class(*c).len() >= k + 1)
            .collect()
    }

    /// Split-aware validation: disjoint seen/unseen covering every
    /// annotated class.
    pub fn validate(&self) -> Result<()> {
        let mut split = BTreeMap::new();
        for &c in &self.seen {
            split.insert(c, "seen");
        }
        for &c in &self.unseen {
            if split.insert(c, "unseen") == Some("seen") {
                bail_config!("class {c} appears in both splits");
            }
        }
        for ann in &self.file.annotations {
            if !split.contains_key(&ann.class_id) {
                bail_config!("class {} belongs to no split", ann.class_id);
            }
        }
        Ok(())
    }
}

/// Round-robin class folds: fold `f`'s unseen classes are those at sorted
/// positions ≡ f (mod `num_folds`); everything else is seen.
pub fn build_folds(index: &DatasetIndex, num_folds: usize) -> Result<Vec<DatasetIndex>> {
    let mut ids = index.class_ids();
    ids.sort_unstable();
    if num_folds == 0 || !ids.len().is_multiple_of(num_folds) {
        bail_config!(
            "{} classes cannot be split into {num_folds} folds",
            ids.len()
        );
    }
    let mut folds = Vec::with_capacity(num_folds);
    for f in 0..num_folds {
        let unseen: Vec<u32> = ids
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % num_folds == f)
            .map(|(_, &c)| c)
            .collect();
        let seen: Vec<u32> = ids.iter().copied().filter(|c| !unseen.contains(c)).collect();
        let mut fold = index.clone();
        fold.seen = seen;
        fold.unseen = unseen;
        fold.fold = Some(f as u32);
        fold.validate()?;
        folds.push(fold);
    }
    Ok(folds)
}

// ── runtime dataset (index + pixel access with caching) ──────────────────

enum Backing {
    Disk,
    Memory {
        masks: BTreeMap<(u32, u32), Rc<Vec<u8>>>,
        images: BTreeMap<u32, Rc<Vec<u8>>>,
    },
}

/// A dataset ready for sampling: index plus cached pixel access.
pub struct Dataset {
    pub index: DatasetIndex,
    backing: Backing,
    mask_cache: RefCell<BTreeMap<(u32, u32), Rc<Vec<u8>>>>,
    image_cache: RefCell<BTreeMap<u32, Rc<Vec<u8>>>>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_index(DatasetIndex::load(dir)?))
    }

    pub fn from_index(index: DatasetIndex) -> Self {
        Dataset {
            index,
            backing: Backing::Disk,
            mask_cache: RefCell::new(BTreeMap::new()),
            image_cache: RefCell::new(BTreeMap::new()),
        }
    }

    /// Build a file-less dataset: masks are 0/1 buffers at image resolution
    /// keyed by `(image_id, class_id)`; images are raw RGB8 buffers.
    pub fn in_memory(
        index: DatasetIndex,
        masks: BTreeMap<(u32, u32), Vec<u8>>,
        images: BTreeMap<u32, Vec<u8>>,
    ) -> Self {
        Dataset {
            index,
            backing: Backing::Memory {
                masks: masks.into_iter().map(|(k, v)| (k, Rc::new(v))).collect(),
                images: images.into_iter().map(|(k, v)| (k, Rc::new(v))).collect(),
            },
            mask_cache: RefCell::new(BTreeMap::new()),
            image_cache: RefCell::new(BTreeMap::new()),
        }
    }

    /// Instance mask as 0/1 bytes at image resolution.
    pub fn instance_mask(&self, image_id: u32, class_id: u32) -> Result<Rc<Vec<u8>>> {
        if let Backing::Memory { masks, .. } = &self.backing {
            return masks
                .get(&(image_id, class_id))
                .cloned()
                .ok_or_else(|| {
                    Error::Config(format!("no mask for image {image_id} class {class_id}"))
                });
        }
        if let Some(m) = self.mask_cache.borrow().get(&(image_id, class_id)) {
            return Ok(m.clone());
        }
        let ann = self.index.annotation(image_id, class_id)?;
        let img = self.index.image(image_id)?;
        let path = self.index.root.join(&ann.mask_path);
        let gray = image::open(&path)
            .map_err(Error::Image)?
            .to_luma8();
        if gray.width() != img.width || gray.height() != img.height {
            return Err(Error::Format(format!(
                "mask {} is {}x{}, expected {}x{}",
                ann.mask_path,
                gray.width(),
                gray.height(),
                img.width,
                img.height
            )));
        }
        let data: Vec<u8> = gray.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
        let rc = Rc::new(data);
        self.mask_cache
            .borrow_mut()
            .insert((image_id, class_id), rc.clone());
        Ok(rc)
    }

    /// Raw RGB8 bytes of an image (row-major, 3 bytes per pixel).
    pub fn image_rgb(&self, image_id: u32) -> Result<(Rc<Vec<u8>>, u32, u32)> {
        let rec = self.index.image(image_id)?;
        if let Backing::Memory { images, .. } = &self.backing {
            let buf = images
                .get(&image_id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no pixels for image {image_id}")))?;
            return Ok((buf, rec.width, rec.height));
        }
        if let Some(b) = self.image_cache.borrow().get(&image_id) {
            return Ok((b.clone(), rec.width, rec.height));
        }
        let path = self.index.root.join(&rec.path);
        let rgb = image::open(&path).map_err(Error::Image)?.to_rgb8();
        if rgb.width() != rec.width || rgb.height() != rec.height {
            return Err(Error::Format(format!(
                "image {} is {}x{}, expected {}x{}",
                rec.path,
                rgb.width(),
                rgb.height(),
                rec.width,
                rec.height
            )));
        }
        let rc = Rc::new(rgb.into_raw());
        self.image_cache.borrow_mut().insert(image_id, rc.clone());
        Ok((rc, rec.width, rec.height))
    }

    /// Image as a `[1, 3, size, size]` tensor in `[0, 1]`.
    pub fn image_tensor(&self, image_id: u32, size: usize) -> Result<Tensor<f32>> {
        let (rgb, w, h) = self.image_rgb(image_id)?;
        let t = crate::encoder::image_to_tensor(&rgb, w as usize, h as usize, size)?;
        t.reshape(&[1, 3, size, size])
    }
}

// ── episodes ──────────────────────────────────────────────────────────────

/// One (batch size, ways, shots) tuple.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct BatchConfig {
    pub b: usize,
    pub n: usize,
    pub k: usize,
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.n == 0 || self.k == 0 {
            bail_config!("batch config ({},{},{}) must be positive", self.b, self.n, self.k);
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}x{}x{}", self.b, self.n, self.k)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Random,
    MasksOnly,
    BoxesOnly,
    PointsOnly,
    BoxesAndPoints,
}

impl Default for PromptMode {
    fn default() -> Self {
        PromptMode::Random
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PromptMode::Random),
            "masks" | "masks_only" => Ok(PromptMode::MasksOnly),
            "boxes" | "boxes_only" => Ok(PromptMode::BoxesOnly),
            "points" | "points_only" => Ok(PromptMode::PointsOnly),
            "boxes_and_points" => Ok(PromptMode::BoxesAndPoints),
            other => Err(Error::Config(format!("unknown prompt mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportExample {
    pub image_id: u32,
    /// One annotation per episode class, aligned with `Episode::class_ids`.
    pub prompts: Vec<PromptAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Episode-local class order; local label `i + 1` ↔ `class_ids[i]`.
    pub class_ids: Vec<u32>,
    pub query_image: u32,
    /// Whether the coin flip demanded a query containing every class.
    pub all_classes_query: bool,
    pub support: Vec<SupportExample>,
    /// Root seed of the stream this episode belongs to.
    pub seed: u64,
    /// Global position in that stream.
    pub index: u64,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.class_ids.len()
    }

    /// Prompts in the `[L][N]` layout the model consumes.
    pub fn prompt_grid(&self) -> Vec<Vec<PromptAnnotation>> {
        self.support.iter().map(|s| s.prompts.clone()).collect()
    }
}

/// Ground-truth label grid for the episode's query image: 0 = background,
/// `i + 1` = `class_ids[i]`. Instance masks are occlusion-resolved by the
/// generator, so they never overlap.
pub fn episode_labels(ds: &Dataset, ep: &Episode) -> Result<Vec<u8>> {
    let rec = ds.index.image(ep.query_image)?;
    let (w, h) = (rec.width as usize, rec.height as usize);
    let mut labels = vec![0u8; w * h];
    for (i, &cls) in ep.class_ids.iter().enumerate() {
        if !ds.index.classes_in_image(ep.query_image).contains(&cls) {
            continue;
        }
        let mask = ds.instance_mask(ep.query_image, cls)?;
        for (pix, &m) in mask.iter().enumerate() {
            if m != 0 {
                labels[pix] = (i + 1) as u8;
            }
        }
    }
    Ok(labels)
}

/// Resample a label map onto the model's square input canvas, mirroring the
/// image pipeline's geometry (aspect-preserving resize into the top-left
/// corner, padding elsewhere) with nearest-neighbor sampling; padded pixels
/// are background.
pub fn labels_to_canvas(
    labels: &[u8],
    width: usize,
    height: usize,
    target: usize,
) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::shape("labels_to_canvas", width * height, labels.len()));
    }
    if width == target && height == target {
        return Ok(labels.to_vec());
    }
    let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
    let rw = ((width as f64 * scale).round() as usize).clamp(1, target);
    let rh = ((height as f64 * scale).round() as usize).clamp(1, target);
    let mut out = vec![0u8; target * target];
    for y in 0..rh {
        let sy = (((y as f64 + 0.5) * height as f64 / rh as f64) as usize).min(height - 1);
        for x in 0..rw {
            let sx = (((x as f64 + 0.5) * width as f64 / rw as f64) as usize).min(width - 1);
            out[y * target + x] = labels[sy * width + sx];
        }
    }
    Ok(out)
}

/// Nearest-neighbor (block-center) downsample of a square label map by an
/// integer factor, matching the logit grid the decoder produces.
pub fn downsample_labels(labels: &[u8], size: usize, factor: usize) -> Result<Vec<u8>> {
    if labels.len() != size * size {
        return Err(Error::shape("downsample_labels", size * size, labels.len()));
    }
    if factor == 0 || size % factor != 0 {
        bail_config!("cannot downsample a {size}-wide map by {factor}");
    }
    let out_size = size / factor;
    let mut out = vec![0u8; out_size * out_size];
    for y in 0..out_size {
        for x in 0..out_size {
            out[y * out_size + x] = labels[(y * factor + factor / 2) * size + x * factor + factor / 2];
        }
    }
    Ok(out)
}

/// How many retries to give one (class set, coin) draw before reducing N.
const QUERY_RETRIES: usize = 100;

/// Sample one N-way K-shot episode from `class_pool`.
///
/// A fair coin decides whether the query must contain all N classes or any
/// of them; if no qualifying query exists after bounded retries, N is
/// reduced. Support images are drawn per class without replacement
/// (excluding the query) and de-duplicated, attaching every episode-class
/// annotation an image carries — so L ≤ N·K.
pub fn sample_episode(
    ds: &Dataset,
    class_pool: &[u32],
    n: usize,
    k: usize,
    rng: &mut impl Rng,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        bail_config!("episode needs positive N and K");
    }
    let eligible = ds.index.eligible_classes(class_pool, k);
    if eligible.len() < n {
        return Err(Error::Sampling(format!(
            "need {n} classes with >= {} images each; only {} qualify",
            k + 1,
            eligible.len()
        )));
    }

    let mut n_eff = n;
    let mut attempts = 0usize;
    let (chosen, all_mode, query) = loop {
        let picks = rand::seq::index::sample(rng, eligible.len(), n_eff).into_vec();
        let chosen: Vec<u32> = picks.iter().map(|&i| eligible[i]).collect();
        let all_mode = rng.gen_bool(0.5);

        let mut cands: Vec<u32> = ds
            .index
            .file
            .images
            .iter()
            .map(|im| im.id)
            .filter(|&im| {
                let have = ds.index.classes_in_image(im);
                if all_mode {
                    chosen.iter().all(|c| have.contains(c))
                } else {
                    chosen.iter().any(|c| have.contains(c))
                }
            })
            .collect();
        // The query must leave K support images per class.
        cands.retain(|&q| {
            chosen.iter().all(|&c| {
                ds.index
                    .images_with_class(c)
                    .iter()
                    .filter(|&&im| im != q)
                    .count()
                    >= k
            })
        });
        if !cands.is_empty() {
            let q = cands[rng.gen_range(0..cands.len())];
            break (chosen, all_mode, q);
        }
        attempts += 1;
        if attempts >= QUERY_RETRIES {
            if n_eff > 1 {
                n_eff -= 1;
                attempts = 0;
            } else {
                return Err(Error::Sampling(format!(
                    "no qualifying query image after {QUERY_RETRIES} retries at N=1"
                )));
            }
        }
    };

    // K support images per class, first-selection order, de-duplicated.
    let mut order: Vec<u32> = Vec::new();
    for &c in &chosen {
        let pool: Vec<u32> = ds
            .index
            .images_with_class(c)
            .iter()
            .copied()
            .filter(|&im| im != query)
            .collect();
        let picks = rand::seq::index::sample(rng, pool.len(), k).into_vec();
        for &p in &picks {
            let im = pool[p];
            if !order.contains(&im) {
                order.push(im);
            }
        }
    }

    let support = order
        .iter()
        .map(|&im| {
            let have = ds.index.classes_in_image(im);
            let prompts = chosen
                .iter()
                .map(|c| PromptAnnotation {
                    class_present: have.contains(c),
                    ..Default::default()
                })
                .collect();
            SupportExample { image_id: im, prompts }
        })
        .collect();

    Ok(Episode {
        class_ids: chosen,
        query_image: query,
        all_classes_query: all_mode,
        support,
        seed,
        index,
    })
}

/// Draw one batch config uniformly, then build B episodes. Episode `i` of
/// the batch gets stream position `first_index + i`.
pub fn sample_episode_batch(
    ds: &Dataset,
    class_pool: &[u32],
    configs: &[BatchConfig],
    rng: &mut impl Rng,
    seed: u64,
    first_index: u64,
) -> Result<(BatchConfig, Vec<Episode>)> {
    if configs.is_empty() {
        bail_config!("no batch configs given");
    }
    for c in configs {
        c.validate()?;
    }
    let cfg = configs[rng.gen_range(0..configs.len())];
    let mut eps = Vec::with_capacity(cfg.b);
    for i in 0..cfg.b {
        let ep = sample_episode(ds, class_pool, cfg.n, cfg.k, rng, seed, first_index + i as u64)
            .map_err(|e| {
                Error::Sampling(format!("config ({},{},{}): {e}", cfg.b, cfg.n, cfg.k))
            })?;
        eps.push(ep);
    }
    Ok((cfg, eps))
}

/// Point budget per instance.
pub const MAX_POINTS: usize = 10;

/// Area-proportional point count: the reference area is 1/16 of the image,
/// and counts are clamped to `[1, MAX_POINTS]`.
pub fn point_count(mask_area: usize, image_area: usize) -> usize {
    let reference = (image_area as f64) / 16.0;
    let raw = (MAX_POINTS as f64 * mask_area as f64 / reference).round() as usize;
    raw.clamp(1, MAX_POINTS)
}

/// Uniform interior points of a 0/1 mask, as normalized pixel-center
/// coordinates.
pub fn sample_points(
    mask: &[u8],
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(f32, f32)>> {
    let interior: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0).collect();
    if interior.is_empty() {
        return Err(Error::Sampling("cannot sample points from an empty mask".into()));
    }
    let count = point_count(interior.len(), width * height).min(interior.len());
    let picks = rand::seq::index::sample(rng, interior.len(), count).into_vec();
    Ok(picks
        .iter()
        .map(|&p| {
            let pix = interior[p];
            let (r, c) = (pix / width, pix % width);
            (
                (c as f32 + 0.5) / width as f32,
                (r as f32 + 0.5) / height as f32,
            )
        })
        .collect())
}

/// Tight axis-aligned bounds of a 0/1 mask in normalized coordinates (the
/// max edge is exclusive, so a full-frame mask maps to ((0,0),(1,1))).
pub fn tight_box(
    mask: &[u8],
    width: usize,
    height: usize,
) -> Result<((f32, f32), (f32, f32))> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            let (r, c) = (i / width, i % width);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    if r0 == usize::MAX {
        return Err(Error::Sampling("cannot bound an empty mask".into()));
    }
    Ok((
        (c0 as f32 / width as f32, r0 as f32 / height as f32),
        (
            (c1 + 1) as f32 / width as f32,
            (r1 + 1) as f32 / height as f32,
        ),
    ))
}

/// Nearest-neighbour rescale of a 0/1 mask to the prompt resolution.
pub fn mask_to_prompt_res(mask: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = vec![0u8; MASK_RES * MASK_RES];
    for r in 0..MASK_RES {
        let sr = r * height / MASK_RES;
        for c in 0..MASK_RES {
            let sc = c * width / MASK_RES;
            out[r * MASK_RES + c] = mask[sr * width + sc];
        }
    }
    out
}

/// Outcome counters from prompt materialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PromptStats {
    pub masks: usize,
    pub boxes: usize,
    pub points: usize,
    /// Annotations dropped because their instance mask was empty.
    pub skipped: usize,
}

/// Fill in the episode's prompt contents: per present annotation, draw a
/// prompt type (uniform over mask/box/points in random mode) and derive it
/// from the instance mask. Empty instance masks mark the annotation absent
/// and are counted in `skipped`.
pub fn randomize_prompt_types(
    ds: &Dataset,
    ep: &mut Episode,
    mode: PromptMode,
    rng: &mut impl Rng,
) -> Result<PromptStats> {
    let mut stats = PromptStats::default();
    for sup in &mut ep.support {
        let rec = ds.index.image(sup.image_id)?;
        let (w, h) = (rec.width as usize, rec.height as usize);
        for (ci, ann) in sup.prompts.iter_mut().enumerate() {
            if !ann.class_present {
                continue;
            }
            let mask = ds.instance_mask(sup.image_id, ep.class_ids[ci])?;
            if mask.iter().all(|&m| m == 0) {
                ann.class_present = false;
                stats.skipped += 1;
                continue;
            }
            ann.mask = None;
            ann.boxes.clear();
            ann.points.clear();
            let (want_mask, want_box, want_points) = match mode {
                PromptMode::MasksOnly => (true, false, false),
                PromptMode::BoxesOnly => (false, true, false),
                PromptMode::PointsOnly => (false, false, true),
                PromptMode::BoxesAndPoints => (false, true, true),
                PromptMode::Random => match rng.gen_range(0..3u8) {
                    0 => (true, false, false),
                    1 => (false, true, false),
                    _ => (false, false, true),
                },
            };
            if want_mask {
                ann.mask = Some(mask_to_prompt_res(&mask, w, h));
                stats.masks += 1;
            }
            if want_box {
                ann.boxes.push(tight_box(&mask, w, h)?);
                stats.boxes += 1;
            }
            if want_points {
                ann.points = sample_points(&mask, w, h, rng)?;
                stats.points += 1;
            }
        }
    }
    Ok(stats)
}

/// Replace each episode class with a different class from `class_pool`
/// (cyclic shift in sorted order) and resample the supports accordingly,
/// keeping the query untouched. The result pairs the original query and
/// ground truth with wrong-class support evidence — the control arm for
/// measuring how much predictions depend on the prompts.
pub fn swap_episode_classes(
    ds: &Dataset,
    ep: &Episode,
    class_pool: &[u32],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let mut sorted = ds.index.eligible_classes(class_pool, k);
    sorted.sort_unstable();
    if sorted.len() < 2 {
        return Err(Error::Sampling(
            "class swap needs at least two eligible classes".into(),
        ));
    }
    let swapped: Vec<u32> = ep
        .class_ids
        .iter()
        .map(|c| {
            let pos = sorted.iter().position(|x| x == c).unwrap_or(0);
            sorted[(pos + 1) % sorted.len()]
        })
        .collect();

    let mut order: Vec<u32> = Vec::new();
    for &c in &swapped {
        let pool: Vec<u32> = ds
            .index
            .images_with_class(c)
            .iter()
            .copied()
            .filter(|&im| im != ep.query_image)
            .collect();
        if pool.len() < k {
            return Err(Error::Sampling(format!(
                "swap target class {c} has fewer than {k} support images"
            )));
        }
        let picks = rand::seq::index::sample(rng, pool.len(), k).into_vec();
        for &p in &picks {
            let im = pool[p];
            if !order.contains(&im) {
                order.push(im);
            }
        }
    }
    let support = order
        .iter()
        .map(|&im| {
            let have = ds.index.classes_in_image(im);
            let prompts = swapped
                .iter()
                .map(|c| PromptAnnotation {
                    class_present: have.contains(c),
                    ..Default::default()
                })
                .collect();
            SupportExample { image_id: im, prompts }
        })
        .collect();

    Ok(Episode {
        class_ids: swapped,
        query_image: ep.query_image,
        all_classes_query: ep.all_classes_query,
        support,
        seed: ep.seed,
        index: ep.index,
    })
}
