//! Image encoder: non-overlapping patch embedding, a small pre-norm ViT
//! with learned 2-D positional embeddings, and a convolutional neck that
//! projects ViT features into the prompt/decoder working dimension.

use crate::nn::{AttentionConfig, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Init, ParamBuilder};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Input images are square `input_size × input_size` RGB.
    pub input_size: usize,
    pub patch_size: usize,
    pub vit_dim: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    /// Output working dimension D of the neck.
    pub out_dim: usize,
    /// Exclude the ViT backbone from optimizer updates. The neck always
    /// trains — it is the part that adapts generic features to this task.
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Desk-scale preset: 64×64 inputs, 8×8 patches -> 8×8 feature grid.
        EncoderConfig {
            input_size: 64,
            patch_size: 8,
            vit_dim: 96,
            vit_layers: 4,
            vit_heads: 4,
            out_dim: 64,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.vit_dim % self.vit_heads != 0 {
            return Err(Error::Config(format!(
                "vit_dim {} not divisible by vit_heads {}",
                self.vit_dim, self.vit_heads
            )));
        }
        if self.out_dim % 8 != 0 {
            // The decoder projects prototypes to D/8; keep it integral here
            // so misconfiguration fails at startup, not mid-episode.
            return Err(Error::Config(format!(
                "working dimension {} must be divisible by 8",
                self.out_dim
            )));
        }
        Ok(())
    }

    /// Feature-grid side length `input_size / patch_size`.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Cut `[B, C, H, W]` into non-overlapping `p × p` patches: output
/// `[B, (H/p)·(W/p), C·p·p]`, patches in row-major grid order, channel-first
/// flattening inside each patch. Built from reshape/permute so gradients
/// flow through.
pub fn patchify<E: Element>(x: &Tensor<E>, p: usize) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape("patchify", "[B, C, H, W]", x.shape()));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("spatial dims divisible by {p}"), (h, w)));
    }
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])? // [B, gh, gw, C, p, p]
        .reshape(&[b, gh * gw, c * p * p])
}

/// Inverse of [`patchify`]; used by the round-trip oracle and tests.
pub fn unpatchify<E: Element>(patches: &Tensor<E>, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<E>> {
    if patches.rank() != 3 {
        return Err(Error::shape("unpatchify", "[B, T, C·p·p]", patches.shape()));
    }
    let b = patches.shape()[0];
    let (gh, gw) = (h / p, w / p);
    if patches.shape()[1] != gh * gw || patches.shape()[2] != c * p * p {
        return Err(Error::shape("unpatchify", (gh * gw, c * p * p), patches.shape()));
    }
    patches
        .reshape(&[b, gh, gw, c, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])? // [B, C, gh, p, gw, p]
        .reshape(&[b, c, h, w])
}

struct VitBlock<E: Element> {
    ln1: LayerNorm<E>,
    attn: MultiHeadAttention<E>,
    ln2: LayerNorm<E>,
    mlp: Mlp<E>,
}

pub struct ImageEncoder<E: Element> {
    pub cfg: EncoderConfig,
    embed: Linear<E>,
    pos: Tensor<E>, // [T, vit_dim], learned
    blocks: Vec<VitBlock<E>>,
    final_ln: LayerNorm<E>,
    neck_conv1: Tensor<E>, // [D, vit_dim, 1, 1]
    neck_bias1: Tensor<E>,
    neck_ln1: LayerNorm<E>,
    neck_conv2: Tensor<E>, // [D, D, 3, 3]
    neck_bias2: Tensor<E>,
    neck_ln2: LayerNorm<E>,
}

impl<E: Element> ImageEncoder<E> {
    pub fn new(vb: &ParamBuilder<E>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let train_vit = !cfg.frozen;
        let vit = vb.pp("vit");
        let embed = Linear::new(&vit.pp("embed"), cfg.patch_dim(), cfg.vit_dim, true, train_vit)?;
        let pos = vit.get(&[cfg.tokens(), cfg.vit_dim], "pos", Init::TruncNormal(0.02), train_vit)?;
        let attn_cfg = AttentionConfig {
            dim: cfg.vit_dim,
            num_heads: cfg.vit_heads,
            dropout_rate: 0.0,
        };
        let blocks = (0..cfg.vit_layers)
            .map(|i| {
                let bb = vit.pp(format!("block{i}"));
                Ok(VitBlock {
                    ln1: LayerNorm::new(&bb.pp("ln1"), cfg.vit_dim, train_vit)?,
                    attn: MultiHeadAttention::new(&bb.pp("attn"), attn_cfg, train_vit)?,
                    ln2: LayerNorm::new(&bb.pp("ln2"), cfg.vit_dim, train_vit)?,
                    mlp: Mlp::new(&bb.pp("mlp"), cfg.vit_dim, cfg.vit_dim * 4, train_vit)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(&vit.pp("ln_f"), cfg.vit_dim, train_vit)?;

        let neck = vb.pp("neck");
        let neck_conv1 = neck.get(&[cfg.out_dim, cfg.vit_dim, 1, 1], "conv1.w", Init::TruncNormal(0.02), true)?;
        let neck_bias1 = neck.get(&[cfg.out_dim], "conv1.b", Init::Zeros, true)?;
        let neck_ln1 = LayerNorm::new(&neck.pp("ln1"), cfg.out_dim, true)?;
        let neck_conv2 = neck.get(&[cfg.out_dim, cfg.out_dim, 3, 3], "conv2.w", Init::TruncNormal(0.02), true)?;
        let neck_bias2 = neck.get(&[cfg.out_dim], "conv2.b", Init::Zeros, true)?;
        let neck_ln2 = LayerNorm::new(&neck.pp("ln2"), cfg.out_dim, true)?;

        Ok(ImageEncoder {
            cfg,
            embed,
            pos,
            blocks,
            final_ln,
            neck_conv1,
            neck_bias1,
            neck_ln1,
            neck_conv2,
            neck_bias2,
            neck_ln2,
        })
    }

    /// ViT trunk: `[B, 3, S, S]` image batch → `[B, vit_dim, g, g]` feature
    /// maps, `g = S / patch_size`.
    pub fn vit_encode(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let b = images.shape()[0];
        let g = self.cfg.grid();
        let patches = patchify(images, self.cfg.patch_size)?;
        let mut x = self.embed.forward(&patches)?.add(&self.pos)?;
        for blk in &self.blocks {
            let a = blk.attn.forward(
                &blk.ln1.forward(&x)?,
                &blk.ln1.forward(&x)?,
                &blk.ln1.forward(&x)?,
                None,
                false,
                None,
            )?;
            x = x.add(&a)?;
            x = x.add(&blk.mlp.forward(&blk.ln2.forward(&x)?)?)?;
        }
        x = self.final_ln.forward(&x)?;
        // [B, T, Dv] -> [B, Dv, g, g]
        x.permute(&[0, 2, 1])?.reshape(&[b, self.cfg.vit_dim, g, g])
    }

    /// Neck: 1×1 projection, channel layer norm, 3×3 conv (pad 1), channel
    /// layer norm — `[B, vit_dim, g, g] -> [B, D, g, g]`.
    pub fn conv_neck(&self, feats: &Tensor<E>) -> Result<Tensor<E>> {
        let x = feats.conv2d(&self.neck_conv1, Some(&self.neck_bias1), 1, 0)?;
        let x = channel_layer_norm(&x, &self.neck_ln1)?;
        let x = x.conv2d(&self.neck_conv2, Some(&self.neck_bias2), 1, 1)?;
        channel_layer_norm(&x, &self.neck_ln2)
    }

    /// Full encoder: images `[B, 3, S, S]` → features `[B, D, g, g]`.
    pub fn forward(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        self.conv_neck(&self.vit_encode(images)?)
    }
}

/// LayerNorm over the channel axis of `[B, C, H, W]`.
fn channel_layer_norm<E: Element>(x: &Tensor<E>, ln: &LayerNorm<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    ln.forward(&x.permute(&[0, 2, 3, 1])?)?
        .reshape(&[b, h, w, c])?
        .permute(&[0, 3, 1, 2])
}

/// Decode an 8-bit RGB image buffer into a `[3, S, S]` float tensor in
/// `[0, 1]`, bilinearly resized to fit `S × S` preserving aspect ratio, with
/// zero padding on the remainder (top-left anchored).
pub fn image_to_tensor<E: Element>(
    rgb: &[u8],
    width: usize,
    height: usize,
    target: usize,
) -> Result<Tensor<E>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape("image_to_tensor", width * height * 3, rgb.len()));
    }
    // Channel-first float image.
    let mut chw = vec![E::ZERO; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for ch in 0..3 {
                chw[(ch * height + y) * width + x] =
                    E::from_f64(rgb[(y * width + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    if width == target && height == target {
        return Tensor::from_vec(chw, &[3, target, target]);
    }
    // Aspect-preserving resize into the top-left corner, zero pad the rest.
    let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
    let (rw, rh) = (
        ((width as f64 * scale).round() as usize).clamp(1, target),
        ((height as f64 * scale).round() as usize).clamp(1, target),
    );
    let t = Tensor::from_vec(chw, &[1, 3, height, width])?;
    let resized = crate::tensor::no_grad(|| t.upsample_bilinear(rh, rw))?;
    let mut out = vec![E::ZERO; 3 * target * target];
    for ch in 0..3 {
        for y in 0..rh {
            for x in 0..rw {
                out[(ch * target + y) * target + x] = resized.data()[(ch * rh + y) * rw + x];
            }
        }
    }
    Tensor::from_vec(out, &[3, target, target])
}

/// Load an RGB PNG from disk into a `[3, S, S]` tensor (see
/// [`image_to_tensor`] for the resize contract).
pub fn load_image<E: Element>(path: &std::path::Path, target: usize) -> Result<Tensor<E>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    image_to_tensor(img.as_raw(), w, h, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamBuilder, ParamStore};

    #[test]
    fn patchify_roundtrips() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |i| i as f64 * 0.01);
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.shape(), &[2, 4, 48]);
        let back = unpatchify(&p, 3, 8, 8, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn patchify_layout_is_rowmajor_channelfirst() {
        // 1×1 patches expose the flattening order directly.
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let p = patchify(&x, 1).unwrap();
        // token (0,0) = [c0(0,0), c1(0,0)] = [0, 4]
        assert_eq!(&p.data()[0..2], &[0.0, 4.0]);
        // token (0,1) = [1, 5]
        assert_eq!(&p.data()[2..4], &[1.0, 5.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let x = Tensor::<f64>::zeros(&[1, 3, 9, 9]);
        assert!(patchify(&x, 4).is_err());
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_size: 16,
            patch_size: 4,
            vit_dim: 24,
            vit_layers: 2,
            vit_heads: 2,
            out_dim: 16,
            frozen: false,
        }
    }

    #[test]
    fn encoder_shapes_follow_config() {
        let vb = ParamBuilder::<f32>::new(ParamStore::new(), 11);
        let enc = ImageEncoder::new(&vb.pp("enc"), small_cfg()).unwrap();
        let img = Tensor::<f32>::from_fn(&[2, 3, 16, 16], |i| (i as f32 * 0.001).sin());
        let feats = enc.forward(&img).unwrap();
        assert_eq!(feats.shape(), &[2, 16, 4, 4]);
    }

    #[test]
    fn frozen_encoder_has_no_trainable_vit() {
        let mut cfg = small_cfg();
        cfg.frozen = true;
        let vb = ParamBuilder::<f32>::new(ParamStore::new(), 11);
        let _enc = ImageEncoder::new(&vb.pp("enc"), cfg).unwrap();
        let (store, _) = vb.finish();
        for (name, p) in store.iter() {
            if name.contains(".vit.") {
                assert!(!p.trainable, "{name} should be frozen");
            }
            if name.contains(".neck.") {
                assert!(p.trainable, "{name} should stay trainable");
            }
        }
    }

    #[test]
    fn translation_by_one_patch_shifts_tokens_with_zero_pos() {
        let cfg = small_cfg();
        let vb = ParamBuilder::<f64>::new(ParamStore::new(), 13);
        let enc = ImageEncoder::new(&vb.pp("enc"), cfg.clone()).unwrap();
        let (mut store, _) = vb.finish();
        // Remove positional information so token identity is content-only.
        if let Some(p) = store.get_mut("enc.vit.pos") {
            p.data = std::sync::Arc::new(vec![0.0; p.data.len()]);
        }
        let vb2 = ParamBuilder::<f64>::new(store, 13);
        let enc2 = ImageEncoder::new(&vb2.pp("enc"), cfg.clone()).unwrap();
        let _ = enc;

        let s = cfg.input_size;
        let base: Vec<f64> = (0..3 * s * s).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        // Shift the image horizontally by one patch, wrapping around.
        let p = cfg.patch_size;
        let mut shifted = vec![0.0; base.len()];
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let sx = (x + p) % s;
                    shifted[(c * s + y) * s + x] = base[(c * s + y) * s + sx];
                }
            }
        }
        let f1 = enc2
            .vit_encode(&Tensor::from_vec(base, &[1, 3, s, s]).unwrap())
            .unwrap();
        let f2 = enc2
            .vit_encode(&Tensor::from_vec(shifted, &[1, 3, s, s]).unwrap())
            .unwrap();
        // Feature cell (y, x) of the shifted image equals cell (y, x+1 mod g).
        let g = cfg.grid();
        let dv = cfg.vit_dim;
        for d in 0..dv {
            for gy in 0..g {
                for gx in 0..g {
                    let a = f2.data()[(d * g + gy) * g + gx];
                    let b = f1.data()[(d * g + gy) * g + (gx + 1) % g];
                    assert!(
                        (a - b).abs() < 1e-9,
                        "token grid must translate with the image (d={d}, {gy},{gx})"
                    );
                }
            }
        }
    }

    #[test]
    fn image_resize_pads_with_zeros() {
        // 2:1 aspect image into a square target.
        let (w, h) = (8usize, 4usize);
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        let t = image_to_tensor::<f32>(&rgb, w, h, 8).unwrap();
        assert_eq!(t.shape(), &[3, 8, 8]);
        // Bottom half (rows 4..8) must be zero padding.
        for ch in 0..3 {
            for y in 4..8 {
                for x in 0..8 {
                    assert_eq!(t.data()[(ch * 8 + y) * 8 + x], 0.0);
                }
            }
        }
    }
}
