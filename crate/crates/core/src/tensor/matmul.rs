//! Batched matrix multiplication.
//!
//! Layout is row-major throughout. Three inner kernels cover forward and
//! both gradient products without materializing transposes:
//!
//! * `mm_nn`: `C += A·B` — saxpy form, vectorizes along the output row.
//! * `mm_nt`: `C += A·Bᵀ` — dot-product form over contiguous rows.
//! * `mm_tn`: `C += Aᵀ·B` — saxpy form over the shared leading index.
//!
//! The canonical variant sorts each output element's partial products by
//! value before summing, making the result invariant to any permutation of
//! the contraction axis — required where tokens from different classes mix
//! and class order must not perturb a single bit.

use super::{Element, Tensor};
use crate::{Error, Result};

#[inline]
pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    // Fixed 8-lane accumulation: lets LLVM vectorize the reduction while
    // keeping the summation order deterministic.
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let ai = &a[i * LANES..(i + 1) * LANES];
        let bi = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ai[l] * bi[l];
        }
    }
    let mut s = E::ZERO;
    for l in acc {
        s += l;
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn mm_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn mm_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub(crate) fn mm_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    // a is [m, k], b is [m, n], c is [k, n]
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Resolved batch iteration for broadcastable batch dims: for each output
/// batch index, the element offsets into `a` and `b`.
struct BatchPlan {
    batch_shape: Vec<usize>,
    count: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize], a_mat: usize, b_mat: usize) -> Result<BatchPlan> {
    let rank = a_batch.len().max(b_batch.len());
    let pad = |dims: &[usize]| -> Vec<usize> {
        let mut v = vec![1usize; rank - dims.len()];
        v.extend_from_slice(dims);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut batch_shape = vec![0usize; rank];
    for i in 0..rank {
        batch_shape[i] = match (pa[i], pb[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("matmul batch", a_batch, b_batch)),
        };
    }
    let count: usize = batch_shape.iter().product::<usize>().max(1);
    // Strides with 0 on broadcast axes.
    let elem_strides = |p: &[usize], mat: usize| -> Vec<usize> {
        let mut s = vec![0usize; rank];
        let mut acc = mat;
        for i in (0..rank).rev() {
            s[i] = if p[i] == 1 { 0 } else { acc };
            acc *= p[i];
        }
        s
    };
    let (sa, sb) = (elem_strides(&pa, a_mat), elem_strides(&pb, b_mat));
    let mut a_offsets = Vec::with_capacity(count);
    let mut b_offsets = Vec::with_capacity(count);
    for flat in 0..count {
        let mut rem = flat;
        let (mut oa, mut ob) = (0usize, 0usize);
        for i in (0..rank).rev() {
            let idx = rem % batch_shape[i];
            rem /= batch_shape[i];
            oa += idx * sa[i];
            ob += idx * sb[i];
        }
        a_offsets.push(oa);
        b_offsets.push(ob);
    }
    Ok(BatchPlan {
        batch_shape,
        count,
        a_offsets,
        b_offsets,
    })
}

fn matmul_impl<E: Element>(a: &Tensor<E>, b: &Tensor<E>, canonical: bool) -> Result<Tensor<E>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("matmul", "rank >= 2", (a.shape(), b.shape())));
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (bk, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if k != bk {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let plan = plan_batches(
        &a.shape()[..a.rank() - 2],
        &b.shape()[..b.rank() - 2],
        m * k,
        k * n,
    )?;
    let mut out = vec![E::ZERO; plan.count * m * n];
    for bi in 0..plan.count {
        let ab = &a.data()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k];
        let bb = &b.data()[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n];
        let cb = &mut out[bi * m * n..(bi + 1) * m * n];
        if canonical {
            mm_nn_canonical(ab, bb, cb, m, k, n);
        } else {
            mm_nn(ab, bb, cb, m, k, n);
        }
    }
    let mut out_shape = plan.batch_shape.clone();
    out_shape.push(m);
    out_shape.push(n);

    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |node, g| {
            let a = node.parent(0).clone();
            let b = node.parent(1).clone();
            a.accumulate_grad(|buf| {
                for bi in 0..plan.count {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &b.data()[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n];
                    // dA = G · Bᵀ
                    mm_nt(gb, bb, &mut buf[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k], m, n, k);
                }
            });
            b.accumulate_grad(|buf| {
                for bi in 0..plan.count {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &a.data()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k];
                    // dB = Aᵀ · G
                    mm_tn(ab, gb, &mut buf[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n], m, k, n);
                }
            });
        }),
    ))
}

fn mm_nn_canonical<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    let mut terms = vec![E::ZERO; k];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            for (p, t) in terms.iter_mut().enumerate() {
                *t = arow[p] * b[p * n + j];
            }
            terms.sort_unstable_by(E::total_cmp);
            let mut s = E::ZERO;
            for &t in terms.iter() {
                s += t;
            }
            c[i * n + j] += s;
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Batched matrix product `a @ b` with broadcastable batch dims:
    /// `[..., m, k] @ [..., k, n] -> [..., m, n]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        matmul_impl(self, rhs, false)
    }

    /// Like [`Tensor::matmul`], but each output element sums its partial
    /// products in value-sorted order, so the result is bit-identical under
    /// any permutation of the contraction axis. Quadratic-ish in `k·log k`;
    /// use only where that invariance is load-bearing.
    pub fn matmul_canonical(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        matmul_impl(self, rhs, true)
    }

    /// `a @ bᵀ` without materializing the transpose:
    /// `[..., m, k] @ [..., n, k] -> [..., m, n]`.
    pub fn matmul_tb(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(Error::shape("matmul_tb", "rank >= 2", (self.shape(), rhs.shape())));
        }
        let (m, k) = (self.shape()[self.rank() - 2], self.shape()[self.rank() - 1]);
        let (n, bk) = (rhs.shape()[rhs.rank() - 2], rhs.shape()[rhs.rank() - 1]);
        if k != bk {
            return Err(Error::shape("matmul_tb", self.shape(), rhs.shape()));
        }
        let plan = plan_batches(
            &self.shape()[..self.rank() - 2],
            &rhs.shape()[..rhs.rank() - 2],
            m * k,
            n * k,
        )?;
        let mut out = vec![E::ZERO; plan.count * m * n];
        for bi in 0..plan.count {
            let ab = &self.data()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k];
            let bb = &rhs.data()[plan.b_offsets[bi]..plan.b_offsets[bi] + n * k];
            mm_nt(ab, bb, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut out_shape = plan.batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);

        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                let a = node.parent(0).clone();
                let b = node.parent(1).clone();
                a.accumulate_grad(|buf| {
                    for bi in 0..plan.count {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &b.data()[plan.b_offsets[bi]..plan.b_offsets[bi] + n * k];
                        // dA = G · B
                        mm_nn(gb, bb, &mut buf[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k], m, n, k);
                    }
                });
                b.accumulate_grad(|buf| {
                    for bi in 0..plan.count {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &a.data()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k];
                        // dB = Gᵀ · A
                        mm_tn(gb, ab, &mut buf[plan.b_offsets[bi]..plan.b_offsets[bi] + n * k], m, n, k);
                    }
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::leaf(Arc::new(data), shape, true).unwrap()
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[5, 7]);
        let b = randn(&mut rng, &[7, 3]);
        let c = a.matmul(&b).unwrap();
        let want = naive(a.data(), b.data(), 5, 7, 3);
        for (x, y) in c.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_broadcasts_shared_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[4, 2, 3]);
        let b = randn(&mut rng, &[3, 5]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[4, 2, 5]);
        for bi in 0..4 {
            let want = naive(&a.data()[bi * 6..(bi + 1) * 6], b.data(), 2, 3, 5);
            let got = &c.data()[bi * 10..(bi + 1) * 10];
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_tb_equals_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[2, 4, 6]);
        let b = randn(&mut rng, &[2, 5, 6]);
        let fast = a.matmul_tb(&b).unwrap();
        let slow = a.matmul(&b.transpose_last2().unwrap()).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        // weight the output so the gradient isn't uniform
        let w = randn(&mut rng, &[3, 2]);
        let loss = a.matmul(&b).unwrap().mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        let ga = a.grad().unwrap();
        let h = 1e-6;
        for idx in 0..a.numel() {
            let mut lo = a.data().to_vec();
            let mut hi = lo.clone();
            lo[idx] -= h;
            hi[idx] += h;
            let f = |d: Vec<f64>| {
                Tensor::from_vec(d, &[3, 4])
                    .unwrap()
                    .matmul(&Tensor::from_vec(b.data().to_vec(), &[4, 2]).unwrap())
                    .unwrap()
                    .mul(&Tensor::from_vec(w.data().to_vec(), &[3, 2]).unwrap())
                    .unwrap()
                    .sum_all()
                    .item()
            };
            let num = (f(hi) - f(lo)) / (2.0 * h);
            assert!((ga[idx] - num).abs() < 1e-6, "idx {idx}: {} vs {num}", ga[idx]);
        }
    }

    #[test]
    fn canonical_matmul_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 17;
        let a32: Vec<f32> = (0..2 * k).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let b32: Vec<f32> = (0..k * 3).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
        let a = Tensor::<f32>::from_vec(a32.clone(), &[2, k]).unwrap();
        let b = Tensor::<f32>::from_vec(b32.clone(), &[k, 3]).unwrap();
        let base = a.matmul_canonical(&b).unwrap();

        // Permute the contraction axis of both operands consistently.
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut a_p = vec![0f32; 2 * k];
        let mut b_p = vec![0f32; k * 3];
        for (new, &old) in perm.iter().enumerate() {
            for i in 0..2 {
                a_p[i * k + new] = a32[i * k + old];
            }
            b_p[new * 3..new * 3 + 3].copy_from_slice(&b32[old * 3..old * 3 + 3]);
        }
        let ap = Tensor::<f32>::from_vec(a_p, &[2, k]).unwrap();
        let bp = Tensor::<f32>::from_vec(b_p, &[k, 3]).unwrap();
        let permuted = ap.matmul_canonical(&bp).unwrap();

        for (x, y) in base.data().iter().zip(permuted.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
