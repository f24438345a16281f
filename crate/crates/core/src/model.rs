//! Full few-shot segmentation model: image encoder + prompt encoder + mask
//! decoder, glued together per episode.

use crate::data::{Dataset, Episode};
use crate::decoder::{DecoderConfig, MaskDecoder};
use crate::encoder::{EncoderConfig, ImageEncoder};
use crate::params::{ParamBuilder, ParamStore};
use crate::prompt::{
    pool_assignment_for_classes, PromptAnnotation, PromptConfig, PromptEncoder, PrototypeSet,
};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        self.decoder.validate()?;
        let d = self.encoder.out_dim;
        if self.prompt.dim != d || self.decoder.dim != d {
            return Err(Error::Config(format!(
                "working dimension mismatch: encoder {d}, prompt {}, decoder {}",
                self.prompt.dim, self.decoder.dim
            )));
        }
        let g = self.encoder.grid();
        if self.prompt.grid != g || self.decoder.grid != g {
            return Err(Error::Config(format!(
                "feature grid mismatch: encoder {g}, prompt {}, decoder {}",
                self.prompt.grid, self.decoder.grid
            )));
        }
        if self.encoder.input_size % 4 != 0 || self.decoder.quarter != self.encoder.input_size / 4 {
            return Err(Error::Config(format!(
                "decoder logit resolution {} must be a quarter of the {} input",
                self.decoder.quarter, self.encoder.input_size
            )));
        }
        Ok(())
    }

    /// Image side length the model expects.
    pub fn input_size(&self) -> usize {
        self.encoder.input_size
    }
}

pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder<E>,
    pub prompt: PromptEncoder<E>,
    pub decoder: MaskDecoder<E>,
}

/// A model together with its parameter store and the graph leaves bound to
/// it (store order), as needed by the optimizer.
pub struct BuiltModel<E: Element> {
    pub model: Model<E>,
    pub store: ParamStore<E>,
    pub bound: Vec<(String, Tensor<E>)>,
}

impl<E: Element> Model<E> {
    pub fn new(vb: &ParamBuilder<E>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            encoder: ImageEncoder::new(&vb.pp("encoder"), cfg.encoder.clone())?,
            prompt: PromptEncoder::new(&vb.pp("prompt"), cfg.prompt.clone())?,
            decoder: MaskDecoder::new(&vb.pp("decoder"), cfg.decoder.clone())?,
            cfg,
        })
    }

    /// Build (or rebind) a model from a parameter store. Fresh parameters
    /// are initialized from `seed`; existing entries are bound as-is, so
    /// passing a trained store reconstructs the trained model.
    pub fn build(cfg: ModelConfig, store: ParamStore<E>, seed: u64) -> Result<BuiltModel<E>> {
        let vb = ParamBuilder::new(store, seed);
        let model = Model::new(&vb.pp("model"), cfg)?;
        let (store, bound) = vb.finish();
        Ok(BuiltModel { model, store, bound })
    }

    /// Encode support images and prompts into class prototypes.
    ///
    /// * `support_images` — `[L, 3, S, S]` pixel tensor.
    /// * `anns[l][n]` — prompts of class `n` in example `l`.
    /// * `pool_assignment` — one distinct pool row per class.
    pub fn episode_prototypes(
        &self,
        support_images: &Tensor<E>,
        anns: &[Vec<PromptAnnotation>],
        pool_assignment: &[usize],
    ) -> Result<PrototypeSet<E>> {
        let feats = self.encoder.forward(support_images)?;
        self.prompt.forward(anns, &feats, pool_assignment)
    }

    /// Logits for a batch of query images against fixed prototypes:
    /// `[Q, 3, S, S] -> Q × [N+1, S/4, S/4]`.
    pub fn query_logits(
        &self,
        query_images: &Tensor<E>,
        prototypes: &Tensor<E>,
    ) -> Result<Vec<Tensor<E>>> {
        let feats = self.encoder.forward(query_images)?;
        let q = feats.shape()[0];
        let (d, g) = (self.cfg.decoder.dim, self.cfg.decoder.grid);
        (0..q)
            .map(|i| {
                let f = feats.narrow(0, i, 1)?.reshape(&[d, g, g])?;
                self.decoder.decode(&f, prototypes)
            })
            .collect()
    }

    /// Inference-time alternative to prototype averaging: decode against
    /// each support example's prototypes separately and fuse the logit maps
    /// by a per-pixel max. Class channels only aggregate over examples where
    /// the class is present; the result is detached from the graph.
    pub fn query_logits_per_example(
        &self,
        query_images: &Tensor<E>,
        protos: &PrototypeSet<E>,
    ) -> Result<Vec<Tensor<E>>> {
        let n = protos.per_example.shape()[0];
        let l = protos.per_example.shape()[1];
        let d = self.cfg.decoder.dim;
        let q_res = self.cfg.decoder.quarter;
        let bg = self.prompt.background()?;

        let feats = self.encoder.forward(query_images)?;
        let q = feats.shape()[0];
        let g = self.cfg.decoder.grid;

        let mut out = Vec::with_capacity(q);
        for qi in 0..q {
            let f = feats.narrow(0, qi, 1)?.reshape(&[d, g, g])?;
            let hw = q_res * q_res;
            let mut fused = vec![E::from_f64(f64::NEG_INFINITY); (n + 1) * hw];
            let mut covered = vec![false; n + 1];
            for ex in 0..l {
                let ex_protos = Tensor::cat(
                    &[
                        bg.clone(),
                        protos.per_example.narrow(1, ex, 1)?.reshape(&[n, d])?,
                    ],
                    0,
                )?;
                let logits = self.decoder.decode(&f, &ex_protos)?;
                let data = logits.data();
                for cls in 0..=n {
                    // class channels fuse only where the class has a prompt
                    if cls > 0 && !protos.presence[cls - 1][ex] {
                        continue;
                    }
                    covered[cls] = true;
                    for pix in 0..hw {
                        let v = data[cls * hw + pix];
                        let slot = &mut fused[cls * hw + pix];
                        if v > *slot {
                            *slot = v;
                        }
                    }
                }
            }
            if covered.iter().any(|&c| !c) {
                return Err(Error::Sampling(
                    "a class has no present support example".into(),
                ));
            }
            out.push(Tensor::from_vec(fused, &[n + 1, q_res, q_res])?);
        }
        Ok(out)
    }

    /// Full-resolution label map for each query image.
    pub fn predict(
        &self,
        support_images: &Tensor<E>,
        anns: &[Vec<PromptAnnotation>],
        pool_assignment: &[usize],
        query_images: &Tensor<E>,
        per_example: bool,
    ) -> Result<Vec<Vec<u8>>> {
        let s = self.cfg.input_size();
        let protos = self.episode_prototypes(support_images, anns, pool_assignment)?;
        let logit_maps = if per_example {
            self.query_logits_per_example(query_images, &protos)?
        } else {
            self.query_logits(query_images, &protos.prototypes)?
        };
        logit_maps
            .iter()
            .map(|lg| self.decoder.predict_mask(lg, s, s))
            .collect()
    }
}

// ── episode glue ─────────────────────────────────────────────────────────
// Bridges between sampled episodes (image ids + prompt annotations) and the
// tensors the model consumes. Image loading produces `f32`; these widen to
// the model's element type.

fn convert_f32<E: Element>(t: &Tensor<f32>) -> Result<Tensor<E>> {
    Tensor::from_vec(
        t.data().iter().map(|&v| E::from_f32(v)).collect(),
        t.shape(),
    )
}

/// Support images of an episode as the `[L, 3, S, S]` tensor the encoder
/// expects.
pub fn episode_support_tensor<E: Element>(
    model: &Model<E>,
    ds: &Dataset,
    ep: &Episode,
) -> Result<Tensor<E>> {
    let s = model.cfg.input_size();
    let parts: Vec<Tensor<E>> = ep
        .support
        .iter()
        .map(|sup| convert_f32(&ds.image_tensor(sup.image_id, s)?))
        .collect::<Result<_>>()?;
    Tensor::cat(&parts, 0)
}

/// One image as a `[1, 3, S, S]` tensor at the model's input size.
pub fn episode_image_tensor<E: Element>(
    model: &Model<E>,
    ds: &Dataset,
    image_id: u32,
) -> Result<Tensor<E>> {
    convert_f32(&ds.image_tensor(image_id, model.cfg.input_size())?)
}

/// Token-pool rows for an episode, keyed by class identity so permuting the
/// episode's class order permutes the assignment along. Identity mapping
/// when the pool is disabled (the encoder ignores it then).
pub fn episode_assignment<E: Element>(model: &Model<E>, ep: &Episode) -> Result<Vec<usize>> {
    if model.cfg.prompt.token_pool {
        pool_assignment_for_classes(
            ep.seed,
            ep.index,
            &ep.class_ids,
            model.cfg.prompt.token_pool_size,
        )
    } else {
        Ok((0..ep.n()).collect())
    }
}

/// Predicted label map for the episode's query image (values `0..=N`, at the
/// model's input resolution).
pub fn episode_predict<E: Element>(
    model: &Model<E>,
    ds: &Dataset,
    ep: &Episode,
    per_example: bool,
) -> Result<Vec<u8>> {
    let support = episode_support_tensor(model, ds, ep)?;
    let query = episode_image_tensor(model, ds, ep.query_image)?;
    let assignment = episode_assignment(model, ep)?;
    Ok(model
        .predict(&support, &ep.prompt_grid(), &assignment, &query, per_example)?
        .remove(0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::prompt::MASK_RES;
    use crate::tensor::no_grad;

    /// Smallest config that exercises every component.
    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 32,
                patch_size: 8,
                vit_dim: 32,
                vit_layers: 1,
                vit_heads: 2,
                out_dim: 16,
                frozen: false,
            },
            prompt: PromptConfig {
                dim: 16,
                max_points: 3,
                max_boxes: 1,
                num_heads: 2,
                two_way_depth: 1,
                mlp_ratio: 2,
                token_pool_size: 16,
                token_pool: true,
                mixer: true,
                grid: 4,
            },
            decoder: DecoderConfig {
                dim: 16,
                num_heads: 2,
                two_way_depth: 1,
                mlp_ratio: 2,
                grid: 4,
                quarter: 8,
                spatial_convs: true,
            },
        }
    }

    fn ann_for(class_seed: u64, present: bool) -> PromptAnnotation {
        if !present {
            return PromptAnnotation::absent();
        }
        let mut mask = vec![0u8; MASK_RES * MASK_RES];
        let off = (class_seed as usize * 37) % 128;
        for r in off..off + 64 {
            for c in off..off + 64 {
                mask[r * MASK_RES + c] = 1;
            }
        }
        PromptAnnotation {
            mask: Some(mask),
            points: vec![(
                0.1 + 0.07 * (class_seed as f32 % 9.0),
                0.2 + 0.05 * (class_seed as f32 % 11.0),
            )],
            boxes: vec![((0.05, 0.05), (0.6, 0.7))],
            class_present: true,
        }
    }

    fn image(seed: u64, s: usize) -> Tensor<f32> {
        Tensor::from_fn(&[1, 3, s, s], |i| {
            (((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97) % 251) as f32) / 251.0
        })
    }

    #[test]
    fn config_cross_checks_wiring() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.prompt.dim = 32;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.decoder.grid = 8;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.decoder.quarter = 16;
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic_and_rebindable() {
        let cfg = tiny_config();
        let a = Model::<f32>::build(cfg.clone(), ParamStore::new(), 11).unwrap();
        let b = Model::<f32>::build(cfg.clone(), ParamStore::new(), 11).unwrap();
        assert_eq!(a.store.total_elements(), b.store.total_elements());
        for ((na, pa), (nb, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data.as_slice(), pb.data.as_slice());
        }
        // Rebinding the same store creates no new parameters.
        let c = Model::<f32>::build(cfg, a.store, 999).unwrap();
        for ((na, pa), (nb, pb)) in b.store.iter().zip(c.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data.as_slice(), pb.data.as_slice());
        }
    }

    #[test]
    fn end_to_end_episode_produces_finite_logits_and_labels() {
        let built = Model::<f32>::build(tiny_config(), ParamStore::new(), 5).unwrap();
        let m = &built.model;
        let s = m.cfg.input_size();
        let support = image(1, s);
        let query = image(2, s);
        let anns = vec![vec![ann_for(0, true), ann_for(1, true)]];
        let protos = m.episode_prototypes(&support, &anns, &[3, 9]).unwrap();
        let logits = m.query_logits(&query, &protos.prototypes).unwrap();
        assert_eq!(logits.len(), 1);
        assert_eq!(logits[0].shape(), &[3, 8, 8]);
        assert!(logits[0].data().iter().all(|v| v.is_finite()));

        let labels = m
            .predict(&support, &anns, &[3, 9], &query, false)
            .unwrap();
        assert_eq!(labels[0].len(), s * s);
        assert!(labels[0].iter().all(|&l| l <= 2));
    }

    #[test]
    fn permuting_episode_classes_permutes_logits_bitwise() {
        // The acceptance-level invariant, checked at full-model scope: with
        // pool rows assigned by class identity, reordering the classes of an
        // episode reorders the logit channels bit-exactly.
        let built = Model::<f32>::build(tiny_config(), ParamStore::new(), 21).unwrap();
        let m = &built.model;
        let s = m.cfg.input_size();
        let support = image(3, s);
        let query = image(4, s);

        let class_ids = [7u32, 2, 11];
        let anns: Vec<Vec<PromptAnnotation>> = vec![class_ids
            .iter()
            .map(|&c| ann_for(c as u64, true))
            .collect()];
        let assign = crate::prompt::pool_assignment_for_classes(42, 0, &class_ids, 16).unwrap();
        let logits = no_grad(|| {
            let protos = m.episode_prototypes(&support, &anns, &assign).unwrap();
            m.query_logits(&query, &protos.prototypes).unwrap()
        });

        // permutation σ: new position -> old position
        let perm = [2usize, 0, 1];
        let class_ids_p: Vec<u32> = perm.iter().map(|&o| class_ids[o]).collect();
        let anns_p: Vec<Vec<PromptAnnotation>> =
            vec![perm.iter().map(|&o| anns[0][o].clone()).collect()];
        let assign_p =
            crate::prompt::pool_assignment_for_classes(42, 0, &class_ids_p, 16).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(assign_p[new], assign[old], "assignment must follow identity");
        }
        let logits_p = no_grad(|| {
            let protos = m.episode_prototypes(&support, &anns_p, &assign_p).unwrap();
            m.query_logits(&query, &protos.prototypes).unwrap()
        });

        let hw = 8 * 8;
        let a = logits[0].data();
        let b = logits_p[0].data();
        // background channel identical
        for pix in 0..hw {
            assert_eq!(a[pix].to_bits(), b[pix].to_bits());
        }
        for (new, &old) in perm.iter().enumerate() {
            for pix in 0..hw {
                let x = b[(new + 1) * hw + pix];
                let y = a[(old + 1) * hw + pix];
                assert_eq!(x.to_bits(), y.to_bits(), "channel {new} vs {old}, pixel {pix}");
            }
        }
    }

    #[test]
    fn per_example_fusion_skips_absent_examples() {
        let built = Model::<f32>::build(tiny_config(), ParamStore::new(), 8).unwrap();
        let m = &built.model;
        let s = m.cfg.input_size();
        let support = Tensor::cat(&[image(5, s), image(6, s)], 0).unwrap();
        let query = image(7, s);
        // class 0 present in both examples, class 1 only in the second
        let anns = vec![
            vec![ann_for(0, true), ann_for(1, false)],
            vec![ann_for(2, true), ann_for(3, true)],
        ];
        let protos = m.episode_prototypes(&support, &anns, &[1, 4]).unwrap();
        let fused = m.query_logits_per_example(&query, &protos).unwrap();
        assert_eq!(fused[0].shape(), &[3, 8, 8]);
        assert!(fused[0].data().iter().all(|v| v.is_finite()));

        // Fusing only example 2's prototypes for class 1 means the fused map
        // must equal that example's map on channel 2.
        let bg = m.prompt.background().unwrap();
        let ex1 = Tensor::cat(
            &[
                bg,
                protos.per_example.narrow(1, 1, 1).unwrap().reshape(&[2, 16]).unwrap(),
            ],
            0,
        )
        .unwrap();
        let feats = m.encoder.forward(&query).unwrap();
        let f = feats.narrow(0, 0, 1).unwrap().reshape(&[16, 4, 4]).unwrap();
        let solo = m.decoder.decode(&f, &ex1).unwrap();
        let hw = 64;
        for pix in 0..hw {
            assert_eq!(
                fused[0].data()[2 * hw + pix].to_bits(),
                solo.data()[2 * hw + pix].to_bits()
            );
        }
    }
}
