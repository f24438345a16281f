//! Synthetic shape dataset: filled geometric shapes on textured backgrounds,
//! rendered without anti-aliasing so masks are exact. Shapes may overlap;
//! later shapes occlude earlier ones and each instance mask records only the
//! visible region, so masks within an image never overlap.

use super::{AnnotationRecord, ClassRecord, Dataset, DatasetIndex, ImageRecord, IndexFile};
use crate::rng::{stream_rng, Stream};
use crate::{bail_config, Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// The shape vocabulary, in class-id order.
pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "square", "triangle", "ring", "cross", "bar", "ellipse", "diamond",
];

/// Minimum visible pixels for an instance to count.
const MIN_VISIBLE: usize = 24;
/// Re-place attempts before reducing the shape count of an image.
const PLACE_RETRIES: usize = 20;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    /// Number of shape classes (≤ 8).
    pub classes: usize,
    pub images: usize,
    /// Square image side length.
    pub size: usize,
    /// Per-image class count range (inclusive).
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            images: 400,
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPE_NAMES.len() {
            bail_config!(
                "class count must be 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.classes
            );
        }
        if self.images == 0 {
            bail_config!("image count must be positive");
        }
        if self.size < 16 {
            bail_config!("image size must be at least 16, got {}", self.size);
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            bail_config!(
                "invalid shapes-per-image range {}..={}",
                self.min_shapes,
                self.max_shapes
            );
        }
        if self.max_shapes > self.classes {
            bail_config!(
                "cannot place {} distinct classes out of {}",
                self.max_shapes,
                self.classes
            );
        }
        Ok(())
    }
}

struct Placement {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rot: f64,
    color: [u8; 3],
}

/// Point-membership test in the shape's local frame (unit radius).
fn inside(class: usize, x: f64, y: f64) -> bool {
    match class {
        0 => x * x + y * y <= 1.0,                            // disk
        1 => x.abs() <= 0.82 && y.abs() <= 0.82,              // square
        2 => {
            // upward triangle with vertices (0,-1), (±0.95, 0.75)
            let y0 = -1.0;
            let (x1, y1) = (0.95, 0.75);
            if y < y0 || y > y1 {
                return false;
            }
            let half = x1 * (y - y0) / (y1 - y0);
            x.abs() <= half
        }
        3 => {
            let r2 = x * x + y * y;                           // ring
            (0.3..=1.0).contains(&r2.sqrt())
        }
        4 => (x.abs() <= 0.32 && y.abs() <= 1.0) || (y.abs() <= 0.32 && x.abs() <= 1.0), // cross
        5 => x.abs() <= 1.0 && y.abs() <= 0.3,                // bar
        6 => x * x + (y / 0.55) * (y / 0.55) <= 1.0,          // ellipse
        7 => x.abs() + y.abs() <= 1.0,                        // diamond
        _ => false,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Class colors: one hue slot per class with per-instance jitter. Hue
/// correlates with class identity but never identifies it exactly.
fn class_color(class: usize, n_classes: usize, rng: &mut impl Rng) -> [u8; 3] {
    let hue = class as f64 / n_classes as f64 + rng.gen_range(-0.035..0.035);
    let sat = rng.gen_range(0.55..0.9);
    let val = rng.gen_range(0.6..0.95);
    hsv_to_rgb(hue, sat, val)
}

fn place(class: usize, n_classes: usize, size: usize, rng: &mut impl Rng) -> Placement {
    let s = size as f64;
    Placement {
        class,
        cx: rng.gen_range(0.2 * s..0.8 * s),
        cy: rng.gen_range(0.2 * s..0.8 * s),
        radius: rng.gen_range(0.16 * s..0.3 * s),
        rot: rng.gen_range(0.0..std::f64::consts::PI),
        color: class_color(class, n_classes, rng),
    }
}

/// Ownership grid: for each pixel, the index of the topmost shape covering
/// it (placements later in the list are on top), or `usize::MAX`.
fn rasterize(placements: &[Placement], size: usize) -> Vec<usize> {
    let mut owner = vec![usize::MAX; size * size];
    for (k, p) in placements.iter().enumerate() {
        let (sin, cos) = p.rot.sin_cos();
        // bounding square in pixel space (local frame is unit-radius)
        let reach = p.radius * 1.7;
        let r0 = ((p.cy - reach).floor().max(0.0)) as usize;
        let r1 = ((p.cy + reach).ceil().min(size as f64 - 1.0)) as usize;
        let c0 = ((p.cx - reach).floor().max(0.0)) as usize;
        let c1 = ((p.cx + reach).ceil().min(size as f64 - 1.0)) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dx = (c as f64 + 0.5 - p.cx) / p.radius;
                let dy = (r as f64 + 0.5 - p.cy) / p.radius;
                // rotate into the local frame
                let lx = cos * dx + sin * dy;
                let ly = -sin * dx + cos * dy;
                if inside(p.class, lx, ly) {
                    owner[r * size + c] = k;
                }
            }
        }
    }
    owner
}

struct Composition {
    placements: Vec<Placement>,
    owner: Vec<usize>,
}

/// Draw shape placements until every instance keeps a visible area.
fn compose(classes: &[usize], n_classes: usize, size: usize, rng: &mut impl Rng) -> Composition {
    let mut subset: Vec<usize> = classes.to_vec();
    loop {
        for _ in 0..PLACE_RETRIES {
            let placements: Vec<Placement> = subset
                .iter()
                .map(|&c| place(c, n_classes, size, rng))
                .collect();
            let owner = rasterize(&placements, size);
            let mut counts = vec![0usize; placements.len()];
            for &o in &owner {
                if o != usize::MAX {
                    counts[o] += 1;
                }
            }
            if counts.iter().all(|&c| c >= MIN_VISIBLE) {
                return Composition { placements, owner };
            }
        }
        // Crowded canvas: drop the last class and retry.
        subset.pop();
        debug_assert!(!subset.is_empty(), "a single shape always fits");
    }
}

/// The pixels of one generated image plus its per-instance visible masks.
pub struct RenderedImage {
    pub rgb: Vec<u8>,
    /// `(class_id, visible 0/1 mask)` in z-order.
    pub instances: Vec<(u32, Vec<u8>)>,
}

/// Render image `index` of the spec. Deterministic in `(spec.seed, index)`.
pub fn render_image(spec: &SynthSpec, index: u64) -> RenderedImage {
    let size = spec.size;
    let mut rng = stream_rng(spec.seed, Stream::Synth, index);

    // Background: muted base color with stripe/checker distractor patches
    // and per-pixel noise.
    let base = [
        rng.gen_range(30u8..90),
        rng.gen_range(30u8..90),
        rng.gen_range(30u8..90),
    ];
    let mut rgb = vec![0u8; size * size * 3];
    for pix in 0..size * size {
        for ch in 0..3 {
            rgb[pix * 3 + ch] = base[ch].saturating_add(rng.gen_range(0..12));
        }
    }
    for _ in 0..rng.gen_range(1..4usize) {
        // low-contrast rectangle patch with a stripe pattern
        let pw = rng.gen_range(size / 8..size / 2);
        let ph = rng.gen_range(size / 8..size / 2);
        let px = rng.gen_range(0..size - pw);
        let py = rng.gen_range(0..size - ph);
        let delta: i16 = rng.gen_range(8..22);
        let stripe = rng.gen_range(2..5usize);
        for r in py..py + ph {
            for c in px..px + pw {
                if (r / stripe + c / stripe) % 2 == 0 {
                    for ch in 0..3 {
                        let v = rgb[(r * size + c) * 3 + ch] as i16 + delta;
                        rgb[(r * size + c) * 3 + ch] = v.clamp(0, 255) as u8;
                    }
                }
            }
        }
    }

    // Choose classes and compose shapes.
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let classes: Vec<usize> =
        rand::seq::index::sample(&mut rng, spec.classes, count).into_vec();
    let comp = compose(&classes, spec.classes, size, &mut rng);

    // Paint shapes with per-pixel noise.
    for (pix, &o) in comp.owner.iter().enumerate() {
        if o == usize::MAX {
            continue;
        }
        let color = comp.placements[o].color;
        for ch in 0..3 {
            let noise: i16 = rng.gen_range(-8..=8);
            let v = color[ch] as i16 + noise;
            rgb[pix * 3 + ch] = v.clamp(0, 255) as u8;
        }
    }

    // Visible masks per instance.
    let instances = comp
        .placements
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mask: Vec<u8> = comp.owner.iter().map(|&o| u8::from(o == k)).collect();
            (p.class as u32, mask)
        })
        .collect();

    RenderedImage { rgb, instances }
}

/// Generate the dataset fully in memory (no files): useful for tests and
/// statistics. Images and masks live in the returned [`Dataset`].
pub fn synthesize_in_memory(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut file = IndexFile::default();
    for c in 0..spec.classes {
        file.classes.push(ClassRecord {
            id: c as u32,
            name: SHAPE_NAMES[c].to_string(),
        });
    }
    let mut masks = BTreeMap::new();
    let mut images = BTreeMap::new();
    for i in 0..spec.images {
        let rendered = render_image(spec, i as u64);
        let id = i as u32;
        file.images.push(ImageRecord {
            id,
            path: format!("images/img_{i:05}.png"),
            width: spec.size as u32,
            height: spec.size as u32,
        });
        for (cls, mask) in rendered.instances {
            file.annotations.push(AnnotationRecord {
                image_id: id,
                class_id: cls,
                mask_path: format!("masks/img_{i:05}_cls{cls}.png"),
            });
            masks.insert((id, cls), mask);
        }
        images.insert(id, rendered.rgb);
    }
    let index = DatasetIndex::from_file("<memory>", file)?;
    Ok(Dataset::in_memory(index, masks, images))
}

/// Generate the dataset and write it to `dir` (index.json + PNGs).
pub fn synthesize_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let mut file = IndexFile::default();
    for c in 0..spec.classes {
        file.classes.push(ClassRecord {
            id: c as u32,
            name: SHAPE_NAMES[c].to_string(),
        });
    }
    let size = spec.size as u32;
    for i in 0..spec.images {
        let rendered = render_image(spec, i as u64);
        let id = i as u32;
        let img_path = format!("images/img_{i:05}.png");
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(size, size, rendered.rgb)
                .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
        buf.save(dir.join(&img_path)).map_err(Error::Image)?;
        file.images.push(ImageRecord {
            id,
            path: img_path,
            width: size,
            height: size,
        });
        for (cls, mask) in rendered.instances {
            let mask_path = format!("masks/img_{i:05}_cls{cls}.png");
            let pixels: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
            let mbuf: image::GrayImage = image::ImageBuffer::from_raw(size, size, pixels)
                .ok_or_else(|| Error::Format("mask buffer size mismatch".into()))?;
            mbuf.save(dir.join(&mask_path)).map_err(Error::Image)?;
            file.annotations.push(AnnotationRecord {
                image_id: id,
                class_id: cls,
                mask_path,
            });
        }
    }
    let index = DatasetIndex::from_file(dir, file)?;
    index.save(dir)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_folds, sample_episode, PromptMode};
    use crate::rng::{stream_rng, Stream};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            classes: 8,
            images: 24,
            size: 48,
            min_shapes: 1,
            max_shapes: 3,
            seed: 11,
        }
    }

    #[test]
    fn spec_validation_catches_bad_ranges() {
        let mut s = small_spec();
        s.classes = 9;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.max_shapes = 0;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.min_shapes = 4;
        s.max_shapes = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small_spec();
        let a = render_image(&spec, 3);
        let b = render_image(&spec, 3);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.instances, b.instances);
        let c = render_image(&spec, 4);
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn instances_are_nonempty_disjoint_and_in_bounds() {
        let spec = small_spec();
        for i in 0..spec.images as u64 {
            let r = render_image(&spec, i);
            assert!(!r.instances.is_empty());
            let mut owned = vec![false; spec.size * spec.size];
            for (cls, mask) in &r.instances {
                assert!((*cls as usize) < spec.classes);
                assert_eq!(mask.len(), spec.size * spec.size);
                let area = mask.iter().filter(|&&m| m != 0).count();
                assert!(area >= MIN_VISIBLE, "image {i} class {cls}: {area} px");
                for (pix, &m) in mask.iter().enumerate() {
                    if m != 0 {
                        assert!(!owned[pix], "overlapping visible masks");
                        owned[pix] = true;
                    }
                }
            }
            // distinct classes per image
            let mut ids: Vec<u32> = r.instances.iter().map(|(c, _)| *c).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), r.instances.len());
        }
    }

    #[test]
    fn in_memory_dataset_supports_episodes() {
        let ds = synthesize_in_memory(&small_spec()).unwrap();
        assert_eq!(ds.index.file.images.len(), 24);
        let folds = build_folds(&ds.index, 4).unwrap();
        assert_eq!(folds[0].unseen, vec![0, 4]);

        let mut rng = stream_rng(1, Stream::TrainEpisode, 0);
        let pool = ds.index.class_ids();
        let mut ep = sample_episode(&ds, &pool, 1, 1, &mut rng, 1, 0).unwrap();
        crate::data::randomize_prompt_types(&ds, &mut ep, PromptMode::Random, &mut rng).unwrap();
        let labels = crate::data::episode_labels(&ds, &ep).unwrap();
        assert_eq!(labels.len(), 48 * 48);
    }

    #[test]
    fn written_dataset_reloads_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = small_spec();
        spec.images = 8;
        let written = synthesize_dataset(&spec, tmp.path()).unwrap();
        let loaded = DatasetIndex::load(tmp.path()).unwrap();
        assert_eq!(written.file, loaded.file);
        assert_eq!(written.content_hash(), loaded.content_hash());

        // pixel round-trip through the PNGs
        let ds = Dataset::open(tmp.path()).unwrap();
        let mem = synthesize_in_memory(&spec).unwrap();
        for im in 0..8u32 {
            let (disk_rgb, _, _) = ds.image_rgb(im).unwrap();
            let (mem_rgb, _, _) = mem.image_rgb(im).unwrap();
            assert_eq!(disk_rgb, mem_rgb, "image {im} differs after reload");
            for &cls in ds.index.classes_in_image(im) {
                let a = ds.instance_mask(im, cls).unwrap();
                let b = mem.instance_mask(im, cls).unwrap();
                assert_eq!(a, b, "mask {im}/{cls} differs after reload");
            }
        }

        // episode round-trip determinism
        let pool = ds.index.class_ids();
        let sample = |d: &Dataset| {
            (0..10)
                .map(|i| {
                    let mut rng = stream_rng(5, Stream::EvalEpisode, i);
                    let mut ep = sample_episode(d, &pool, 2, 1, &mut rng, 5, i).unwrap();
                    crate::data::randomize_prompt_types(d, &mut ep, PromptMode::Random, &mut rng)
                        .unwrap();
                    ep
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(sample(&ds), sample(&mem));
    }

    #[test]
    fn rerun_writes_byte_identical_index() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            images: 6,
            ..small_spec()
        };
        synthesize_dataset(&spec, t1.path()).unwrap();
        synthesize_dataset(&spec, t2.path()).unwrap();
        let a = std::fs::read(t1.path().join("index.json")).unwrap();
        let b = std::fs::read(t2.path().join("index.json")).unwrap();
        assert_eq!(a, b);
    }
}
