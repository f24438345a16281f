//! 2-D convolution ops over `[B, C, H, W]` tensors, plus pooling and
//! bilinear resizing.
//!
//! Convolution here is cross-correlation (no kernel flip), the usual deep
//! learning convention. `transposed_conv2d` is the exact adjoint: for
//! matching stride/padding and a weight tensor reinterpreted from
//! `[OC, IC, kh, kw]` to `[IN, OUT, kh, kw]`,
//! `⟨conv2d(x), y⟩ == ⟨x, transposed_conv2d(y)⟩` holds to rounding error —
//! the integration tests pin that identity down.

use super::{Element, Tensor};
use crate::{Error, Result};

/// Valid output range along one axis so the input index `o*stride + k - pad`
/// stays inside `[0, in_len)`.
fn out_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  =>  o >= ceil((pad - k) / stride)
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride + k - pad < in_len  =>  o <= (in_len - 1 + pad - k) / stride
    let hi = if in_len + pad > k {
        (((in_len - 1 + pad - k) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    out: &mut [E],
    n: usize,
    (c, h, wd): (usize, usize, usize),
    (oc, kh, kw): (usize, usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) {
    for bi in 0..n {
        let x_img = &x[bi * c * h * wd..(bi + 1) * c * h * wd];
        let out_img = &mut out[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
        for o in 0..oc {
            let plane = &mut out_img[o * oh * ow..(o + 1) * oh * ow];
            if let Some(b) = bias {
                plane.fill(b[o]);
            }
            for ic in 0..c {
                let x_plane = &x_img[ic * h * wd..(ic + 1) * h * wd];
                for ki in 0..kh {
                    let (r_lo, r_hi) = out_range(ki, pad, stride, h, oh);
                    for kj in 0..kw {
                        let wv = w[((o * c + ic) * kh + ki) * kw + kj];
                        let (c_lo, c_hi) = out_range(kj, pad, stride, wd, ow);
                        for r in r_lo..r_hi {
                            let ih = r * stride + ki - pad;
                            let x_row = &x_plane[ih * wd..(ih + 1) * wd];
                            let o_row = &mut plane[r * ow..(r + 1) * ow];
                            for q in c_lo..c_hi {
                                o_row[q] += wv * x_row[q * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// 2-D convolution: `x [B, C, H, W]`, `w [OC, C, kh, kw]`, optional bias
    /// `[OC]`. The spatial extent must divide exactly:
    /// `(H + 2·pad - kh) % stride == 0` (same for width).
    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        if self.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape("conv2d", "[B,C,H,W] and [OC,C,kh,kw]", (self.shape(), w.shape())));
        }
        let (n, c, h, wd) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oc, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c {
            return Err(Error::shape("conv2d", format!("weight in-channels {c}"), wc));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let span_h = (h + 2 * pad).checked_sub(kh).ok_or_else(|| Error::shape("conv2d", "kernel <= padded input", (kh, h + 2 * pad)))?;
        let span_w = (wd + 2 * pad).checked_sub(kw).ok_or_else(|| Error::shape("conv2d", "kernel <= padded input", (kw, wd + 2 * pad)))?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("spatial span divisible by stride {stride}"),
                (span_h, span_w),
            ));
        }
        let (oh, ow) = (span_h / stride + 1, span_w / stride + 1);
        if let Some(b) = bias {
            if b.shape() != [oc] {
                return Err(Error::shape("conv2d bias", [oc], b.shape()));
            }
        }
        let mut out = vec![E::ZERO; n * oc * oh * ow];
        conv_forward(
            self.data(),
            w.data(),
            bias.map(|b| b.data()),
            &mut out,
            n,
            (c, h, wd),
            (oc, kh, kw),
            (oh, ow),
            stride,
            pad,
        );

        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            out,
            vec![n, oc, oh, ow],
            parents,
            Box::new(move |node, g| {
                let x = node.parent(0).clone();
                let w = node.parent(1).clone();
                // dx: scatter weights against the output gradient.
                x.accumulate_grad(|dx| {
                    for bi in 0..n {
                        let g_img = &g[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
                        let dx_img = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        for o in 0..oc {
                            let g_plane = &g_img[o * oh * ow..(o + 1) * oh * ow];
                            for ic in 0..c {
                                let dx_plane = &mut dx_img[ic * h * wd..(ic + 1) * h * wd];
                                for ki in 0..kh {
                                    let (r_lo, r_hi) = out_range(ki, pad, stride, h, oh);
                                    for kj in 0..kw {
                                        let wv = w.data()[((o * c + ic) * kh + ki) * kw + kj];
                                        let (c_lo, c_hi) = out_range(kj, pad, stride, wd, ow);
                                        for r in r_lo..r_hi {
                                            let ih = r * stride + ki - pad;
                                            let dx_row = &mut dx_plane[ih * wd..(ih + 1) * wd];
                                            let g_row = &g_plane[r * ow..(r + 1) * ow];
                                            for q in c_lo..c_hi {
                                                dx_row[q * stride + kj - pad] += wv * g_row[q];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                // dw: correlate input with the output gradient.
                w.accumulate_grad(|dw| {
                    for bi in 0..n {
                        let x_img = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
                        let g_img = &g[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
                        for o in 0..oc {
                            let g_plane = &g_img[o * oh * ow..(o + 1) * oh * ow];
                            for ic in 0..c {
                                let x_plane = &x_img[ic * h * wd..(ic + 1) * h * wd];
                                for ki in 0..kh {
                                    let (r_lo, r_hi) = out_range(ki, pad, stride, h, oh);
                                    for kj in 0..kw {
                                        let (c_lo, c_hi) = out_range(kj, pad, stride, wd, ow);
                                        let mut acc = E::ZERO;
                                        for r in r_lo..r_hi {
                                            let ih = r * stride + ki - pad;
                                            let x_row = &x_plane[ih * wd..(ih + 1) * wd];
                                            let g_row = &g_plane[r * ow..(r + 1) * ow];
                                            for q in c_lo..c_hi {
                                                acc += x_row[q * stride + kj - pad] * g_row[q];
                                            }
                                        }
                                        dw[((o * c + ic) * kh + ki) * kw + kj] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                if has_bias {
                    node.parent(2).accumulate_grad(|db| {
                        for bi in 0..n {
                            for o in 0..oc {
                                let base = (bi * oc + o) * oh * ow;
                                let mut acc = E::ZERO;
                                for &gv in &g[base..base + oh * ow] {
                                    acc += gv;
                                }
                                db[o] += acc;
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tensor::conv2d`]):
    /// `x [B, C, H, W]`, `w [C, OC, kh, kw]` (in-channels leading), optional
    /// bias `[OC]`. Output spatial size is `(H-1)·stride + kh - 2·pad`.
    pub fn transposed_conv2d(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        if self.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape(
                "transposed_conv2d",
                "[B,C,H,W] and [C,OC,kh,kw]",
                (self.shape(), w.shape()),
            ));
        }
        let (n, c, h, wd) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (wc, oc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c {
            return Err(Error::shape("transposed_conv2d", format!("weight in-channels {c}"), wc));
        }
        if stride == 0 {
            return Err(Error::Config("transposed_conv2d stride must be >= 1".into()));
        }
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("transposed_conv2d", "positive output size", (h, kh, pad)))?;
        let ow = ((wd - 1) * stride + kw)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("transposed_conv2d", "positive output size", (wd, kw, pad)))?;
        if let Some(b) = bias {
            if b.shape() != [oc] {
                return Err(Error::shape("transposed_conv2d bias", [oc], b.shape()));
            }
        }

        let mut out = vec![E::ZERO; n * oc * oh * ow];
        for bi in 0..n {
            let x_img = &self.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            let out_img = &mut out[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
            for o in 0..oc {
                let plane = &mut out_img[o * oh * ow..(o + 1) * oh * ow];
                if let Some(b) = bias {
                    plane.fill(b.data()[o]);
                }
                for ic in 0..c {
                    let x_plane = &x_img[ic * h * wd..(ic + 1) * h * wd];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = w.data()[((ic * oc + o) * kh + ki) * kw + kj];
                            for r in 0..h {
                                let Some(orow) = (r * stride + ki).checked_sub(pad) else {
                                    continue;
                                };
                                if orow >= oh {
                                    continue;
                                }
                                let x_row = &x_plane[r * wd..(r + 1) * wd];
                                let o_row = &mut plane[orow * ow..(orow + 1) * ow];
                                for (q, &xv) in x_row.iter().enumerate() {
                                    let Some(ocol) = (q * stride + kj).checked_sub(pad) else {
                                        continue;
                                    };
                                    if ocol >= ow {
                                        continue;
                                    }
                                    o_row[ocol] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            out,
            vec![n, oc, oh, ow],
            parents,
            Box::new(move |node, g| {
                let x = node.parent(0).clone();
                let w = node.parent(1).clone();
                // dx[b,ic,r,q] = Σ_{o,ki,kj} g[b,o,r*s+ki-pad,q*s+kj-pad] · w[ic,o,ki,kj]
                x.accumulate_grad(|dx| {
                    for bi in 0..n {
                        let g_img = &g[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
                        let dx_img = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        for ic in 0..c {
                            let dx_plane = &mut dx_img[ic * h * wd..(ic + 1) * h * wd];
                            for o in 0..oc {
                                let g_plane = &g_img[o * oh * ow..(o + 1) * oh * ow];
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let wv = w.data()[((ic * oc + o) * kh + ki) * kw + kj];
                                        for r in 0..h {
                                            let Some(orow) = (r * stride + ki).checked_sub(pad) else {
                                                continue;
                                            };
                                            if orow >= oh {
                                                continue;
                                            }
                                            let g_row = &g_plane[orow * ow..(orow + 1) * ow];
                                            let dx_row = &mut dx_plane[r * wd..(r + 1) * wd];
                                            for q in 0..wd {
                                                let Some(ocol) = (q * stride + kj).checked_sub(pad) else {
                                                    continue;
                                                };
                                                if ocol >= ow {
                                                    continue;
                                                }
                                                dx_row[q] += wv * g_row[ocol];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                w.accumulate_grad(|dw| {
                    for bi in 0..n {
                        let x_img = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
                        let g_img = &g[bi * oc * oh * ow..(bi + 1) * oc * oh * ow];
                        for ic in 0..c {
                            let x_plane = &x_img[ic * h * wd..(ic + 1) * h * wd];
                            for o in 0..oc {
                                let g_plane = &g_img[o * oh * ow..(o + 1) * oh * ow];
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let mut acc = E::ZERO;
                                        for r in 0..h {
                                            let Some(orow) = (r * stride + ki).checked_sub(pad) else {
                                                continue;
                                            };
                                            if orow >= oh {
                                                continue;
                                            }
                                            let x_row = &x_plane[r * wd..(r + 1) * wd];
                                            let g_row = &g_plane[orow * ow..(orow + 1) * ow];
                                            for q in 0..wd {
                                                let Some(ocol) = (q * stride + kj).checked_sub(pad) else {
                                                    continue;
                                                };
                                                if ocol >= ow {
                                                    continue;
                                                }
                                                acc += x_row[q] * g_row[ocol];
                                            }
                                        }
                                        dw[((ic * oc + o) * kh + ki) * kw + kj] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                if has_bias {
                    node.parent(2).accumulate_grad(|db| {
                        for bi in 0..n {
                            for o in 0..oc {
                                let base = (bi * oc + o) * oh * ow;
                                let mut acc = E::ZERO;
                                for &gv in &g[base..base + oh * ow] {
                                    acc += gv;
                                }
                                db[o] += acc;
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_average_pool(&self) -> Result<Tensor<E>> {
        if self.rank() != 4 {
            return Err(Error::shape("global_average_pool", "[B,C,H,W]", self.shape()));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let inv = E::ONE / E::from_f64(hw as f64);
        let mut out = vec![E::ZERO; n * c];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = E::ZERO;
            for &v in &self.data()[i * hw..(i + 1) * hw] {
                acc += v;
            }
            *slot = acc * inv;
        }
        Ok(Tensor::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|dx| {
                    for (i, &gv) in g.iter().enumerate() {
                        let gs = gv * inv;
                        for v in &mut dx[i * hw..(i + 1) * hw] {
                            *v += gs;
                        }
                    }
                });
            }),
        ))
    }

    /// Bilinear resize to `(out_h, out_w)` with half-pixel sampling.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        if self.rank() != 4 {
            return Err(Error::shape("upsample_bilinear", "[B,C,H,W]", self.shape()));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("upsample_bilinear to empty size".into()));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let table = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
                        .clamp(0.0, (in_len - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let rows = table(h, out_h);
        let cols = table(w, out_w);
        let mut out = vec![E::ZERO; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &self.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
                let fr = E::from_f64(fr);
                for (q, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let fc = E::from_f64(fc);
                    let top = src[r0 * w + c0] + (src[r0 * w + c1] - src[r0 * w + c0]) * fc;
                    let bot = src[r1 * w + c0] + (src[r1 * w + c1] - src[r1 * w + c0]) * fc;
                    dst[r * out_w + q] = top + (bot - top) * fr;
                }
            }
        }
        let (rows_b, cols_b) = (rows.clone(), cols.clone());
        Ok(Tensor::from_op(
            out,
            vec![n, c, out_h, out_w],
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|dx| {
                    for plane in 0..n * c {
                        let gsrc = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                        let dplane = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for (r, &(r0, r1, fr)) in rows_b.iter().enumerate() {
                            let fr = E::from_f64(fr);
                            for (q, &(c0, c1, fc)) in cols_b.iter().enumerate() {
                                let fc = E::from_f64(fc);
                                let gv = gsrc[r * out_w + q];
                                dplane[r0 * w + c0] += gv * (E::ONE - fr) * (E::ONE - fc);
                                dplane[r0 * w + c1] += gv * (E::ONE - fr) * fc;
                                dplane[r1 * w + c0] += gv * fr * (E::ONE - fc);
                                dplane[r1 * w + c1] += gv * fr * fc;
                            }
                        }
                    }
                });
            }),
        ))
    }
}
