//! Elementwise, reduction and shape-manipulation ops.

use super::{strides_of, Element, Tensor};
use crate::{Error, Result};
use rand::Rng;

impl<E: Element> Tensor<E> {
    /// Elementwise addition. The right-hand side may either match the full
    /// shape or be a suffix of it (e.g. a `[D]` bias added to `[T, D]`, or a
    /// `[D, H, W]` grid added to `[N, D, H, W]`), in which case it broadcasts
    /// over the leading axes.
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() == rhs.shape() {
            let data = zip_map(self.data(), rhs.data(), |a, b| a + b);
            return Ok(Tensor::from_op(
                data,
                self.shape().to_vec(),
                vec![self.clone(), rhs.clone()],
                Box::new(|node, g| {
                    node.parent(0).accumulate_grad(|buf| axpy(buf, g));
                    node.parent(1).accumulate_grad(|buf| axpy(buf, g));
                }),
            ));
        }
        // Suffix broadcast.
        let (ls, rs) = (self.shape(), rhs.shape());
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs {
            return Err(Error::shape("add", ls, rs));
        }
        let blk = rhs.numel().max(1);
        let mut data = self.data().to_vec();
        for chunk in data.chunks_exact_mut(blk) {
            for (c, &r) in chunk.iter_mut().zip(rhs.data()) {
                *c += r;
            }
        }
        Ok(Tensor::from_op(
            data,
            ls.to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|buf| axpy(buf, g));
                node.parent(1).accumulate_grad(|buf| {
                    for chunk in g.chunks_exact(blk) {
                        for (b, &gv) in buf.iter_mut().zip(chunk) {
                            *b += gv;
                        }
                    }
                });
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("sub", self.shape(), rhs.shape()));
        }
        let data = zip_map(self.data(), rhs.data(), |a, b| a - b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                node.parent(0).accumulate_grad(|buf| axpy(buf, g));
                node.parent(1).accumulate_grad(|buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b -= gv;
                    }
                });
            }),
        ))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("mul", self.shape(), rhs.shape()));
        }
        let data = zip_map(self.data(), rhs.data(), |a, b| a * b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|node, g| {
                let a = node.parent(0).clone();
                let b = node.parent(1).clone();
                a.accumulate_grad(|buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(b.data()) {
                        *o += gv * bv;
                    }
                });
                b.accumulate_grad(|buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(a.data()) {
                        *o += gv * av;
                    }
                });
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-E::ONE)
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv * c;
                    }
                })
            }),
        )
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| node.parent(0).accumulate_grad(|buf| axpy(buf, g))),
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v.exp()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                let y = node.data().to_vec();
                node.parent(0).accumulate_grad(|buf| {
                    for ((b, &gv), yv) in buf.iter_mut().zip(g).zip(y) {
                        *b += gv * yv;
                    }
                })
            }),
        )
    }

    /// Elementwise `x^e` for constant exponent; defined for `x >= 0`.
    /// `e == 0` is exactly the ones tensor with zero gradient.
    pub fn powf_scalar(&self, e: E) -> Result<Tensor<E>> {
        if self.data().iter().any(|v| *v < E::ZERO) {
            return Err(Error::Numeric(
                "powf_scalar on negative base".into(),
            ));
        }
        if e == E::ZERO {
            let data = vec![E::ONE; self.numel()];
            return Ok(Tensor::from_op(
                data,
                self.shape().to_vec(),
                vec![self.clone()],
                Box::new(|_, _| {}),
            ));
        }
        let data: Vec<E> = self.data().iter().map(|&v| v.powf(e)).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.parent(0).clone();
                x.accumulate_grad(|buf| {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(x.data()) {
                        // d/dx x^e = e x^(e-1); keep the limit finite at 0.
                        let d = if xv == E::ZERO && e < E::ONE {
                            E::ZERO
                        } else {
                            e * xv.powf(e - E::ONE)
                        };
                        *b += gv * d;
                    }
                });
            }),
        ))
    }

    /// GELU with the usual tanh approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let three = E::from_f64(3.0);
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (E::ONE + u.tanh())
            })
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.parent(0).clone();
                x.accumulate_grad(|buf| {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(x.data()) {
                        let u = c * (xv + a * xv * xv * xv);
                        let t = u.tanh();
                        let du = c * (E::ONE + three * a * xv * xv);
                        let d = half * (E::ONE + t) + half * xv * (E::ONE - t * t) * du;
                        *b += gv * d;
                    }
                });
            }),
        )
    }

    /// Inverted dropout: keep with probability `1-p`, scale kept values by
    /// `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<bool> = (0..self.numel()).map(|_| rng.gen::<f64>() >= p).collect();
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { E::ZERO })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|buf| {
                    for ((b, &gv), &keep) in buf.iter_mut().zip(g).zip(&mask) {
                        if keep {
                            *b += gv * scale;
                        }
                    }
                });
            }),
        ))
    }

    // ── reductions ──

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::from_op(
            vec![acc],
            vec![1],
            vec![self.clone()],
            Box::new(|node, g| {
                let gv = g[0];
                node.parent(0).accumulate_grad(|buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                })
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum_all().scale(E::ONE / n)
    }

    // ── shape ops ──

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", shape, self.shape()));
        }
        // Same buffer, new shape; gradient passes straight through.
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|node, g| node.parent(0).accumulate_grad(|buf| axpy(buf, g))),
        ))
    }

    /// Materializing axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("permutation of 0..{rank}"), axes));
        }
        let in_shape = self.shape();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides_of(in_shape);
        let out_strides = strides_of(&out_shape);
        let mut data = vec![E::ZERO; self.numel()];
        permute_copy(self.data(), &mut data, axes, &out_shape, &in_strides, &out_strides);
        let axes_owned = axes.to_vec();
        Ok(Tensor::from_op(
            data,
            out_shape.clone(),
            vec![self.clone()],
            Box::new(move |node, g| {
                // Inverse permutation scatters the gradient back.
                let mut inv = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                let p = node.parent(0).clone();
                let in_shape = p.shape().to_vec();
                let in_strides = strides_of(&in_shape);
                let g_strides = strides_of(node.shape());
                p.accumulate_grad(|buf| {
                    let mut scratch = vec![E::ZERO; buf.len()];
                    permute_copy(g, &mut scratch, &inv, &in_shape, &g_strides, &in_strides);
                    axpy(buf, &scratch);
                });
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<E>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose_last2", "rank >= 2", self.shape()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} within {shape:?}"),
                (start, len),
            ));
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|buf| {
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * full + start) * inner;
                        for i in 0..len * inner {
                            buf[dst + i] += g[src + i];
                        }
                    }
                });
            }),
        ))
    }

    /// Concatenate along `axis`. All other dimensions must match.
    pub fn cat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("cat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("cat", format!("axis < {rank}"), axis));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("cat", first.shape(), p.shape()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::shape("cat", first.shape(), p.shape()));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![E::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let plen = p.shape()[axis];
            for o in 0..outer {
                let src = o * plen * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + plen * inner].copy_from_slice(&p.data()[src..src + plen * inner]);
            }
            offset += plen;
        }
        let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            parts.to_vec(),
            Box::new(move |node, g| {
                let mut offset = 0;
                for (i, &plen) in part_lens.iter().enumerate() {
                    let off = offset;
                    node.parent(i).accumulate_grad(|buf| {
                        for o in 0..outer {
                            let dst = o * plen * inner;
                            let src = (o * axis_total + off) * inner;
                            for k in 0..plen * inner {
                                buf[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += plen;
                }
            }),
        ))
    }

    /// Stack along a fresh leading axis.
    pub fn stack0(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("stack of zero tensors".into()))?;
        let mut unsq_shape = vec![1usize];
        unsq_shape.extend_from_slice(first.shape());
        let unsq: Vec<Tensor<E>> = parts
            .iter()
            .map(|p| p.reshape(&unsq_shape))
            .collect::<Result<_>>()?;
        Tensor::cat(&unsq, 0)
    }

    /// Select rows of a `[R, D]` matrix; gradient scatter-adds back (so
    /// repeated indices accumulate).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::shape("gather_rows", "[R, D]", self.shape()));
        }
        let (r, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("index < {r}"), bad));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![indices.len(), d],
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[i * d + j] += g[k * d + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Treat the tensor as `[rows, D]` (D = last axis) and overwrite invalid
    /// rows with exact `+0.0`. Gradients flow through valid rows only.
    pub fn zero_rows(&self, valid: &[bool]) -> Result<Tensor<E>> {
        let d = *self.shape().last().unwrap_or(&1);
        let rows = self.numel() / d.max(1);
        if valid.len() != rows {
            return Err(Error::shape("zero_rows", rows, valid.len()));
        }
        let mut data = self.data().to_vec();
        for (r, &ok) in valid.iter().enumerate() {
            if !ok {
                data[r * d..(r + 1) * d].fill(E::ZERO);
            }
        }
        let valid = valid.to_vec();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                node.parent(0).accumulate_grad(|buf| {
                    for (r, &ok) in valid.iter().enumerate() {
                        if ok {
                            for j in 0..d {
                                buf[r * d + j] += g[r * d + j];
                            }
                        }
                    }
                });
            }),
        ))
    }
}

// ── helpers ───────────────────────────────────────────────────────────────

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn axpy<E: Element>(acc: &mut [E], g: &[E]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

fn permute_copy<E: Element>(
    src: &[E],
    dst: &mut [E],
    axes: &[usize],
    out_shape: &[usize],
    in_strides: &[usize],
    out_strides: &[usize],
) {
    // For each output position, the source stride along output axis k is the
    // input stride of the axis it came from.
    let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for (out_pos, slot) in dst.iter_mut().enumerate() {
        let mut rem = out_pos;
        let mut src_pos = 0;
        for k in 0..rank {
            idx[k] = rem / out_strides[k];
            rem %= out_strides[k];
            src_pos += idx[k] * map_strides[k];
        }
        *slot = src[src_pos];
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use std::sync::Arc;

    fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::leaf(Arc::new(data), shape, true).unwrap()
    }

    #[test]
    fn add_broadcasts_suffix() {
        let a = leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(vec![10.0, 20.0], &[2]);
        let y = a.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn add_rejects_mismatched() {
        let a = leaf(vec![0.0; 4], &[2, 2]);
        let b = leaf(vec![0.0; 3], &[3]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn mul_product_rule() {
        let a = leaf(vec![2.0, 3.0], &[2]);
        let b = leaf(vec![5.0, 7.0], &[2]);
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn powf_zero_exponent_is_ones_with_zero_grad() {
        let a = leaf(vec![0.0, 0.5, 2.0], &[3]);
        let y = a.powf_scalar(0.0).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0]);
        y.sum_all().backward().unwrap();
        // ∂(x^0)/∂x ≡ 0: nothing accumulates into a.
        let g = a.grad().unwrap_or_else(|| vec![0.0; 3]);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let a = leaf((0..24).map(|v| v as f64).collect(), &[2, 3, 4]);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // permuting back restores the original layout
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), a.data());
        back.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 24]);
    }

    #[test]
    fn narrow_and_cat_are_inverse() {
        let a = leaf((0..12).map(|v| v as f64).collect(), &[3, 4]);
        let left = a.narrow(1, 0, 2).unwrap();
        let right = a.narrow(1, 2, 2).unwrap();
        let together = Tensor::cat(&[left, right], 1).unwrap();
        assert_eq!(together.data(), a.data());
        together.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 12]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let a = leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = a.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_rows_zeroes_and_blocks_grad() {
        let a = leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = a.zero_rows(&[false, true]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 3.0, 4.0]);
        assert!(y.data()[0].is_sign_positive());
        y.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gelu_matches_tanh_formula() {
        let xs = [-1.0, 0.0, 1.0, 2.0, -0.3];
        let a = leaf(xs.to_vec(), &[5]);
        let y = a.gelu();
        for (&x, got) in xs.iter().zip(y.data()) {
            let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            let want = 0.5 * x * (1.0 + u.tanh());
            assert!((got - want).abs() < 1e-12, "gelu({x}) = {got}, want {want}");
        }
        // zero maps to zero, large positive is ~identity
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = leaf(vec![1.0, 2.0], &[2]);
        let y = a.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.data(), a.data());
    }
}
