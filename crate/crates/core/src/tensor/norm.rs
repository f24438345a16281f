//! Softmax family and layer normalization, fused forward/backward.

use super::{Element, Tensor};
use crate::{Error, Result};

/// Iterate rows of `shape` along `axis`: yields (base offset, stride).
fn axis_rows(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize)> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * n * inner + i, inner)))
}

impl<E: Element> Tensor<E> {
    /// Numerically-stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape("softmax", format!("axis < {}", self.rank()), axis));
        }
        let n = self.shape()[axis];
        let x = self.data();
        let mut out = vec![E::ZERO; x.len()];
        for (base, stride) in axis_rows(self.shape(), axis) {
            let mut mx = x[base];
            for j in 1..n {
                mx = mx.maximum(x[base + j * stride]);
            }
            let mut den = E::ZERO;
            for j in 0..n {
                let e = (x[base + j * stride] - mx).exp();
                out[base + j * stride] = e;
                den += e;
            }
            for j in 0..n {
                out[base + j * stride] = out[base + j * stride] / den;
            }
        }
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.data();
                node.parent(0).accumulate_grad(|buf| {
                    for (base, stride) in axis_rows(&shape, axis) {
                        let mut dot = E::ZERO;
                        for j in 0..n {
                            let k = base + j * stride;
                            dot += g[k] * y[k];
                        }
                        for j in 0..n {
                            let k = base + j * stride;
                            buf[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }),
        ))
    }

    /// `log(softmax(x))` along `axis`, fused for stability.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape("log_softmax", format!("axis < {}", self.rank()), axis));
        }
        let n = self.shape()[axis];
        let x = self.data();
        let mut out = vec![E::ZERO; x.len()];
        for (base, stride) in axis_rows(self.shape(), axis) {
            let mut mx = x[base];
            for j in 1..n {
                mx = mx.maximum(x[base + j * stride]);
            }
            let mut den = E::ZERO;
            for j in 0..n {
                den += (x[base + j * stride] - mx).exp();
            }
            let lse = mx + den.ln();
            for j in 0..n {
                out[base + j * stride] = x[base + j * stride] - lse;
            }
        }
        let shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.data();
                node.parent(0).accumulate_grad(|buf| {
                    for (base, stride) in axis_rows(&shape, axis) {
                        let mut gsum = E::ZERO;
                        for j in 0..n {
                            gsum += g[base + j * stride];
                        }
                        for j in 0..n {
                            let k = base + j * stride;
                            buf[k] += g[k] - y[k].exp() * gsum;
                        }
                    }
                });
            }),
        ))
    }

    /// Softmax over the last axis of `[B, Lq, Lk]` scores with an optional
    /// per-batch-row key-validity mask of length `B * Lk`.
    ///
    /// Invalid keys get probability exactly `0.0`; a query row whose mask has
    /// no valid key at all comes out as all zeros (callers treat such rows as
    /// "attend to nothing" and rely on residual paths).
    ///
    /// With `canonical` set, each row's normalizer is summed in value-sorted
    /// order so the output is bit-invariant to key permutations.
    pub fn masked_softmax_last(
        &self,
        mask: Option<&[bool]>,
        canonical: bool,
    ) -> Result<Tensor<E>> {
        if self.rank() != 3 {
            return Err(Error::shape("masked_softmax_last", "[B, Lq, Lk]", self.shape()));
        }
        let (b, lq, lk) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if let Some(m) = mask {
            if m.len() != b * lk {
                return Err(Error::shape("masked_softmax_last", b * lk, m.len()));
            }
        }
        let x = self.data();
        let mut out = vec![E::ZERO; x.len()];
        let mut terms: Vec<E> = Vec::with_capacity(lk);
        for bi in 0..b {
            let row_mask = mask.map(|m| &m[bi * lk..(bi + 1) * lk]);
            for q in 0..lq {
                let base = (bi * lq + q) * lk;
                let row = &x[base..base + lk];
                let out_row = &mut out[base..base + lk];
                let mut mx: Option<E> = None;
                for (j, &v) in row.iter().enumerate() {
                    if row_mask.map_or(true, |m| m[j]) {
                        mx = Some(match mx {
                            Some(cur) => cur.maximum(v),
                            None => v,
                        });
                    }
                }
                let Some(mx) = mx else {
                    continue; // no valid key: row stays all zero
                };
                terms.clear();
                for (j, &v) in row.iter().enumerate() {
                    if row_mask.map_or(true, |m| m[j]) {
                        let e = (v - mx).exp();
                        out_row[j] = e;
                        terms.push(e);
                    }
                }
                let den = if canonical {
                    terms.sort_unstable_by(E::total_cmp);
                    let mut s = E::ZERO;
                    for &t in terms.iter() {
                        s += t;
                    }
                    s
                } else {
                    let mut s = E::ZERO;
                    for &t in terms.iter() {
                        s += t;
                    }
                    s
                };
                for (j, ov) in out_row.iter_mut().enumerate() {
                    if row_mask.map_or(true, |m| m[j]) {
                        *ov = *ov / den;
                    }
                }
            }
        }
        let mask_owned: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.data();
                node.parent(0).accumulate_grad(|buf| {
                    for bi in 0..b {
                        let row_mask = mask_owned.as_ref().map(|m| &m[bi * lk..(bi + 1) * lk]);
                        for q in 0..lq {
                            let base = (bi * lq + q) * lk;
                            let mut dot = E::ZERO;
                            for j in 0..lk {
                                dot += g[base + j] * y[base + j];
                            }
                            for j in 0..lk {
                                if row_mask.map_or(true, |m| m[j]) {
                                    let k = base + j;
                                    buf[k] += y[k] * (g[k] - dot);
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank >= 1", self.shape()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", [d], (gain.shape(), bias.shape())));
        }
        let rows = self.numel() / d;
        let eps = E::from_f64(eps);
        let inv_d = E::ONE / E::from_f64(d as f64);
        let x = self.data();
        let (gm, bt) = (gain.data(), bias.data());
        let mut out = vec![E::ZERO; x.len()];
        let mut xhat = vec![E::ZERO; x.len()];
        let mut inv_std = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = E::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let istd = E::ONE / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = gm[j] * h + bt[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |node, g| {
                let gain = node.parent(1).clone();
                let gm = gain.data().to_vec();
                node.parent(0).accumulate_grad(|buf| {
                    for r in 0..rows {
                        let istd = inv_std[r];
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = E::ZERO; // Σ γ g
                        let mut s2 = E::ZERO; // Σ γ g x̂
                        for j in 0..d {
                            let gg = gm[j] * gr[j];
                            s1 += gg;
                            s2 += gg * hr[j];
                        }
                        s1 *= inv_d;
                        s2 *= inv_d;
                        for j in 0..d {
                            let gg = gm[j] * gr[j];
                            buf[r * d + j] += (gg - s1 - hr[j] * s2) * istd;
                        }
                    }
                });
                node.parent(1).accumulate_grad(|buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                node.parent(2).accumulate_grad(|buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }),
        ))
    }
}
