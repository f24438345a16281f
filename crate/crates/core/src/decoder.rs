//! Mask decoder: prototypes attend to the query feature grid, the grid is
//! upsampled, and per-pixel dot products against the refined prototypes give
//! one logit map per class (plus background).
//!
//! The dense-reads-prototypes attention inside the two-way transformer runs
//! in canonical-summation mode, so the shared query stream is bit-identical
//! under any reordering of the class prototypes — which makes the final
//! logit maps permute exactly with the classes.

use crate::nn::{AttentionConfig, FourierPosEmbed, LayerNorm, Linear, TwoWayTransformer};
use crate::params::{Init, ParamBuilder};
use crate::tensor::{no_grad, Element, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Working dimension D (multiple of 8; the pixel head uses D/8).
    pub dim: usize,
    pub num_heads: usize,
    pub two_way_depth: usize,
    pub mlp_ratio: usize,
    /// Input feature grid side (H_d = W_d).
    pub grid: usize,
    /// Output logit resolution (one quarter of the image side).
    pub quarter: usize,
    /// Ablation switch: extra 3×3 convolutions on the upsampled features.
    pub spatial_convs: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 64,
            num_heads: 8,
            two_way_depth: 2,
            mlp_ratio: 2,
            grid: 8,
            quarter: 16,
            spatial_convs: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % 8 != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must be a multiple of 8",
                self.dim
            )));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.quarter <= self.grid
            || !self.quarter.is_multiple_of(self.grid)
            || !(self.quarter / self.grid).is_power_of_two()
        {
            return Err(Error::Config(format!(
                "logit resolution {} must be a power-of-two multiple (>1) of the feature grid {}",
                self.quarter, self.grid
            )));
        }
        Ok(())
    }

    /// Number of stride-2 upsampling stages.
    pub fn stages(&self) -> usize {
        (self.quarter / self.grid).trailing_zeros() as usize
    }

    /// Channel plan for the upsampler: halve per stage, landing on D/8.
    fn channels(&self) -> Vec<usize> {
        let s = self.stages();
        let mut ch = vec![self.dim];
        for i in 1..=s {
            ch.push((self.dim / 8) << (s - i));
        }
        ch[0] = self.dim;
        ch
    }
}

pub struct MaskDecoder<E: Element> {
    pub cfg: DecoderConfig,
    pe: FourierPosEmbed<E>,
    two_way: TwoWayTransformer<E>,
    /// Transposed-conv stages: weight `[C_in, C_out, 2, 2]` + bias.
    upsample: Vec<(Tensor<E>, Tensor<E>)>,
    /// Channel LayerNorms between stages (stages − 1 of them).
    up_norms: Vec<LayerNorm<E>>,
    proto_mlp: Vec<Linear<E>>,
    spatial: Vec<(Tensor<E>, Tensor<E>)>,
}

impl<E: Element> MaskDecoder<E> {
    pub fn new(vb: &ParamBuilder<E>, cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let attn_cfg = AttentionConfig {
            dim: d,
            num_heads: cfg.num_heads,
            dropout_rate: 0.0,
        };
        let pe = FourierPosEmbed::new(&vb.pp("pe"), d)?;
        let two_way = TwoWayTransformer::new(
            &vb.pp("two_way"),
            cfg.two_way_depth,
            attn_cfg,
            cfg.mlp_ratio,
            true,
        )?;

        let ch = cfg.channels();
        let ub = vb.pp("upsample");
        let upsample = (0..cfg.stages())
            .map(|i| {
                let sb = ub.pp(format!("stage{i}"));
                Ok((
                    sb.get(&[ch[i], ch[i + 1], 2, 2], "w", Init::TruncNormal(0.02), true)?,
                    sb.get(&[ch[i + 1]], "b", Init::Zeros, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let up_norms = (0..cfg.stages().saturating_sub(1))
            .map(|i| LayerNorm::new(&ub.pp(format!("norm{i}")), ch[i + 1], true))
            .collect::<Result<Vec<_>>>()?;

        let mb = vb.pp("proto_mlp");
        let proto_mlp = vec![
            Linear::new(&mb.pp("fc0"), d, d, true, true)?,
            Linear::new(&mb.pp("fc1"), d, d, true, true)?,
            Linear::new(&mb.pp("fc2"), d, d / 8, true, true)?,
        ];

        let spatial = if cfg.spatial_convs {
            let sb = vb.pp("spatial");
            (0..3)
                .map(|i| {
                    let cb = sb.pp(format!("conv{i}"));
                    Ok((
                        cb.get(&[d / 8, d / 8, 3, 3], "w", Init::TruncNormal(0.02), true)?,
                        cb.get(&[d / 8], "b", Init::Zeros, true)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        Ok(MaskDecoder {
            cfg,
            pe,
            two_way,
            upsample,
            up_norms,
            proto_mlp,
            spatial,
        })
    }

    fn channel_norm(&self, x: &Tensor<E>, norm: &LayerNorm<E>) -> Result<Tensor<E>> {
        // [B, C, H, W] -> LN over C -> back.
        let s = x.shape().to_vec();
        let y = x.permute(&[0, 2, 3, 1])?;
        let y = norm.forward(&y)?;
        y.permute(&[0, 3, 1, 2])?.reshape(&s)
    }

    /// Decode one query image: `feats [D, g, g]`, `prototypes [N+1, D]` →
    /// logits `[N+1, q, q]`.
    pub fn decode(&self, feats: &Tensor<E>, prototypes: &Tensor<E>) -> Result<Tensor<E>> {
        let (d, g, q) = (self.cfg.dim, self.cfg.grid, self.cfg.quarter);
        if feats.shape() != [d, g, g] {
            return Err(Error::shape("decode", [d, g, g], feats.shape()));
        }
        if prototypes.rank() != 2 || prototypes.shape()[1] != d {
            return Err(Error::shape("decode", ("[N+1, D]", d), prototypes.shape()));
        }
        let n1 = prototypes.shape()[0];

        let sparse = prototypes.reshape(&[1, n1, d])?;
        let dense = feats.reshape(&[1, d, g * g])?.permute(&[0, 2, 1])?;
        let pe_grid = self.pe.grid(g, g)?;
        let valid = vec![true; n1];
        let (protos, dense) = self
            .two_way
            .forward(&sparse, &dense, &pe_grid, Some(&valid), true)?;

        // Refine prototypes to the pixel-head dimension.
        let mut e = protos.reshape(&[n1, d])?;
        let last = self.proto_mlp.len() - 1;
        for (i, fc) in self.proto_mlp.iter().enumerate() {
            e = fc.forward(&e)?;
            if i != last {
                e = e.gelu();
            }
        }

        // Upsample the query stream to quarter resolution, D/8 channels.
        let mut f = dense.permute(&[0, 2, 1])?.reshape(&[1, d, g, g])?;
        let last = self.upsample.len() - 1;
        for (i, (w, b)) in self.upsample.iter().enumerate() {
            f = f.transposed_conv2d(w, Some(b), 2, 0)?;
            if i != last {
                f = f.gelu();
                f = self.channel_norm(&f, &self.up_norms[i])?;
            }
        }
        if !self.spatial.is_empty() {
            let last = self.spatial.len() - 1;
            for (i, (w, b)) in self.spatial.iter().enumerate() {
                f = f.conv2d(w, Some(b), 1, 1)?;
                if i != last {
                    f = f.gelu();
                }
            }
        }

        // Per-pixel dot products: [N+1, D/8] × [D/8, q·q] -> [N+1, q, q].
        let f = f.reshape(&[d / 8, q * q])?;
        e.matmul(&f)?.reshape(&[n1, q, q])
    }

    /// Upsample logits to `(h, w)` and take the per-pixel argmax. Ties go to
    /// the lower class index. Runs outside the autodiff graph.
    pub fn predict_mask(&self, logits: &Tensor<E>, h: usize, w: usize) -> Result<Vec<u8>> {
        if logits.rank() != 3 {
            return Err(Error::shape("predict_mask", "[N+1, q, q]", logits.shape()));
        }
        let (n1, lq, lw) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        if n1 > u8::MAX as usize {
            return Err(Error::Config(format!("{n1} classes exceed the label range")));
        }
        let up = no_grad(|| -> Result<Tensor<E>> {
            logits
                .reshape(&[1, n1, lq, lw])?
                .upsample_bilinear(h, w)
        })?;
        let data = up.data();
        let mut labels = vec![0u8; h * w];
        for (pix, lab) in labels.iter_mut().enumerate() {
            let mut best = data[pix];
            let mut arg = 0usize;
            for cls in 1..n1 {
                let v = data[cls * h * w + pix];
                if v > best {
                    best = v;
                    arg = cls;
                }
            }
            *lab = arg as u8;
        }
        Ok(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamBuilder, ParamStore};

    fn cfg(quarter: usize, spatial: bool) -> DecoderConfig {
        DecoderConfig {
            dim: 16,
            num_heads: 2,
            two_way_depth: 1,
            mlp_ratio: 2,
            grid: 4,
            quarter,
            spatial_convs: spatial,
        }
    }

    fn dec(seed: u64, quarter: usize, spatial: bool) -> MaskDecoder<f64> {
        let vb = ParamBuilder::new(ParamStore::new(), seed);
        MaskDecoder::new(&vb.pp("decoder"), cfg(quarter, spatial)).unwrap()
    }

    #[test]
    fn decode_output_shape_single_and_double_stage() {
        for (quarter, _stages) in [(8usize, 1usize), (16, 2)] {
            let d = dec(1, quarter, true);
            let feats = Tensor::<f64>::from_fn(&[16, 4, 4], |i| (i as f64 * 0.01).sin());
            let protos = Tensor::<f64>::from_fn(&[3, 16], |i| (i as f64 * 0.02).cos());
            let logits = d.decode(&feats, &protos).unwrap();
            assert_eq!(logits.shape(), &[3, quarter, quarter]);
            assert!(logits.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn config_rejects_bad_resolutions() {
        assert!(cfg(4, true).validate().is_err()); // quarter == grid
        assert!(cfg(12, true).validate().is_err()); // not a power-of-two multiple
        let mut c = cfg(8, true);
        c.dim = 20; // not a multiple of 8
        assert!(c.validate().is_err());
    }

    #[test]
    fn channel_plan_halves_to_an_eighth() {
        assert_eq!(cfg(8, true).channels(), vec![16, 2]);
        assert_eq!(cfg(16, true).channels(), vec![16, 4, 2]);
        assert_eq!(cfg(32, true).channels(), vec![16, 8, 4, 2]);
    }

    #[test]
    fn spatial_convs_toggle_changes_parameter_count() {
        let count = |spatial: bool| {
            let vb = ParamBuilder::<f64>::new(ParamStore::new(), 3);
            MaskDecoder::new(&vb.pp("decoder"), cfg(8, spatial)).unwrap();
            let (store, _) = vb.finish();
            store.total_elements()
        };
        let with = count(true);
        let without = count(false);
        assert_eq!(with - without, 3 * (2 * 2 * 3 * 3 + 2));
    }

    #[test]
    fn permuting_prototypes_permutes_logit_channels_bitwise() {
        let d = dec(4, 8, true);
        let feats = Tensor::<f64>::from_fn(&[16, 4, 4], |i| ((i * 7 % 23) as f64) * 0.05 - 0.4);
        let protos = Tensor::<f64>::from_fn(&[4, 16], |i| ((i * 11 % 31) as f64) * 0.04 - 0.5);
        let logits = d.decode(&feats, &protos).unwrap();

        // Swap prototype rows 1 and 3 (background row 0 stays put).
        let perm = [0usize, 3, 2, 1];
        let mut pd = vec![0.0; protos.numel()];
        for (new, &old) in perm.iter().enumerate() {
            pd[new * 16..(new + 1) * 16].copy_from_slice(&protos.data()[old * 16..(old + 1) * 16]);
        }
        let protos_p = Tensor::from_vec(pd, &[4, 16]).unwrap();
        let logits_p = d.decode(&feats, &protos_p).unwrap();

        let hw = 8 * 8;
        for (new, &old) in perm.iter().enumerate() {
            let a = &logits_p.data()[new * hw..(new + 1) * hw];
            let b = &logits.data()[old * hw..(old + 1) * hw];
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "logits must permute bit-exactly");
            }
        }
    }

    #[test]
    fn predict_mask_breaks_ties_toward_lower_index() {
        let d = dec(5, 8, false);
        // Channels 0 and 2 tie everywhere; channel 1 is lower.
        let mut data = vec![0.0f64; 3 * 4];
        for pix in 0..4 {
            data[pix] = 1.0;
            data[4 + pix] = 0.0;
            data[8 + pix] = 1.0;
        }
        let logits = Tensor::from_vec(data, &[3, 2, 2]).unwrap();
        let labels = d.predict_mask(&logits, 2, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0]);
    }

    #[test]
    fn predict_mask_upsamples_to_target_resolution() {
        let d = dec(6, 8, false);
        let mut data = vec![0.0f64; 2 * 4];
        // class 1 wins on the right column
        data[4 + 1] = 5.0;
        data[4 + 3] = 5.0;
        let logits = Tensor::from_vec(data, &[2, 2, 2]).unwrap();
        let labels = d.predict_mask(&logits, 4, 4).unwrap();
        assert_eq!(labels.len(), 16);
        // left half background, right half class 1
        assert_eq!(labels[0], 0);
        assert_eq!(labels[3], 1);
    }
}
