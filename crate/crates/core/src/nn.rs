//! Neural-net building blocks assembled from tensor ops: linear layers,
//! MLPs, layer norm wrappers, masked multi-head attention, the two-way
//! transformer used by both the prompt encoder and the mask decoder, and the
//! random-Fourier positional embedding.

use crate::params::{Init, ParamBuilder};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Attention hyperparameters. `dim` must be divisible by `num_heads`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        // 8 heads of 32 dims each.
        AttentionConfig {
            dim: 256,
            num_heads: 8,
            dropout_rate: 0.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} must be divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

// ── linear ────────────────────────────────────────────────────────────────

pub struct Linear<E: Element> {
    w: Tensor<E>, // [out, in]
    b: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(
        vb: &ParamBuilder<E>,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
    ) -> Result<Self> {
        let w = vb.get(&[out_dim, in_dim], "w", Init::TruncNormal(0.02), trainable)?;
        let b = if bias {
            Some(vb.get(&[out_dim], "b", Init::Zeros, trainable)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// `[..., in] -> [..., out]`.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.matmul_tb(&self.w)?;
        match &self.b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

// ── layer norm wrapper ────────────────────────────────────────────────────

pub struct LayerNorm<E: Element> {
    g: Tensor<E>,
    b: Tensor<E>,
    eps: f64,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(vb: &ParamBuilder<E>, dim: usize, trainable: bool) -> Result<Self> {
        Ok(LayerNorm {
            g: vb.get(&[dim], "g", Init::Ones, trainable)?,
            b: vb.get(&[dim], "b", Init::Zeros, trainable)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.g, &self.b, self.eps)
    }
}

// ── mlp ───────────────────────────────────────────────────────────────────

pub struct Mlp<E: Element> {
    fc1: Linear<E>,
    fc2: Linear<E>,
}

impl<E: Element> Mlp<E> {
    pub fn new(vb: &ParamBuilder<E>, dim: usize, hidden: usize, trainable: bool) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&vb.pp("fc1"), dim, hidden, true, trainable)?,
            fc2: Linear::new(&vb.pp("fc2"), hidden, dim, true, trainable)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

// ── multi-head attention ──────────────────────────────────────────────────

/// Masked multi-head attention.
///
/// The output projection deliberately carries no bias: a query row whose
/// key mask is empty gets an all-zero attention row, and the zero must
/// survive the projection so residual callers see the input unchanged.
pub struct MultiHeadAttention<E: Element> {
    q: Linear<E>,
    k: Linear<E>,
    v: Linear<E>,
    out: Linear<E>,
    cfg: AttentionConfig,
}

impl<E: Element> MultiHeadAttention<E> {
    pub fn new(vb: &ParamBuilder<E>, cfg: AttentionConfig, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(MultiHeadAttention {
            q: Linear::new(&vb.pp("q"), cfg.dim, cfg.dim, true, trainable)?,
            k: Linear::new(&vb.pp("k"), cfg.dim, cfg.dim, true, trainable)?,
            v: Linear::new(&vb.pp("v"), cfg.dim, cfg.dim, true, trainable)?,
            out: Linear::new(&vb.pp("out"), cfg.dim, cfg.dim, false, trainable)?,
            cfg,
        })
    }

    /// `q_in [B, Lq, D]`, `k_in/v_in [B, Lk, D]`; `key_valid` is a
    /// per-batch-row key mask of length `B·Lk`. With `canonical` set, the
    /// softmax normalizer and the value mix are summed in value-sorted order
    /// (bit-stable under key permutations).
    pub fn forward(
        &self,
        q_in: &Tensor<E>,
        k_in: &Tensor<E>,
        v_in: &Tensor<E>,
        key_valid: Option<&[bool]>,
        canonical: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<E>> {
        if q_in.rank() != 3 || k_in.rank() != 3 || v_in.rank() != 3 {
            return Err(Error::shape("attention", "[B, L, D]", (q_in.shape(), k_in.shape())));
        }
        let (b, lq, d) = (q_in.shape()[0], q_in.shape()[1], q_in.shape()[2]);
        let lk = k_in.shape()[1];
        if d != self.cfg.dim || k_in.shape() != [b, lk, d] || v_in.shape() != [b, lk, d] {
            return Err(Error::shape("attention", (b, lk, self.cfg.dim), (k_in.shape(), v_in.shape())));
        }
        if let Some(m) = key_valid {
            if m.len() != b * lk {
                return Err(Error::shape("attention mask", b * lk, m.len()));
            }
        }
        let (h, hd) = (self.cfg.num_heads, self.cfg.head_dim());

        let split = |t: &Tensor<E>, l: usize| -> Result<Tensor<E>> {
            // [B, L, D] -> [B*H, L, hd]
            t.reshape(&[b, l, h, hd])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, l, hd])
        };
        let qh = split(&self.q.forward(q_in)?, lq)?;
        let kh = split(&self.k.forward(k_in)?, lk)?;
        let vh = split(&self.v.forward(v_in)?, lk)?;

        let scale = E::from_f64(1.0 / (hd as f64).sqrt());
        let scores = qh.matmul_tb(&kh)?.scale(scale);

        let expanded_mask: Option<Vec<bool>> = key_valid.map(|m| {
            let mut e = Vec::with_capacity(b * h * lk);
            for bi in 0..b {
                for _ in 0..h {
                    e.extend_from_slice(&m[bi * lk..(bi + 1) * lk]);
                }
            }
            e
        });
        let mut probs = scores.masked_softmax_last(expanded_mask.as_deref(), canonical)?;
        if self.cfg.dropout_rate > 0.0 {
            if let Some(rng) = dropout_rng {
                probs = probs.dropout(self.cfg.dropout_rate, rng)?;
            }
        }

        let ctx = if canonical {
            probs.matmul_canonical(&vh)?
        } else {
            probs.matmul(&vh)?
        };
        let merged = ctx
            .reshape(&[b, h, lq, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, lq, d])?;
        self.out.forward(&merged)
    }
}

// ── two-way transformer ───────────────────────────────────────────────────

/// One direction-pair of cross attention with pre-norm residuals:
///
/// ```text
/// S = S + Attn(LN(S), LN(D + PE), LN(D + PE))        sparse reads dense
/// S = S + MLP(LN(S))
/// D = D + Attn(LN(D + PE), LN(S), LN(S))             dense reads sparse
/// D = D + MLP(LN(D))
/// ```
///
/// With depth 0 the transform is the identity on both streams. The
/// `canonical_dense_reads` flag applies canonical summation only to the
/// dense-reads-sparse attention (the one place where keys from different
/// classes can mix when the caller batches them together).
pub struct TwoWayTransformer<E: Element> {
    layers: Vec<TwoWayLayer<E>>,
}

struct TwoWayLayer<E: Element> {
    s_ln_q: LayerNorm<E>,
    s_ln_kv: LayerNorm<E>,
    s_attn: MultiHeadAttention<E>,
    s_ln_mlp: LayerNorm<E>,
    s_mlp: Mlp<E>,
    d_ln_q: LayerNorm<E>,
    d_ln_kv: LayerNorm<E>,
    d_attn: MultiHeadAttention<E>,
    d_ln_mlp: LayerNorm<E>,
    d_mlp: Mlp<E>,
}

impl<E: Element> TwoWayTransformer<E> {
    pub fn new(
        vb: &ParamBuilder<E>,
        depth: usize,
        attn: AttentionConfig,
        mlp_ratio: usize,
        trainable: bool,
    ) -> Result<Self> {
        let hidden = attn.dim * mlp_ratio;
        let layers = (0..depth)
            .map(|i| {
                let lb = vb.pp(format!("layer{i}"));
                Ok(TwoWayLayer {
                    s_ln_q: LayerNorm::new(&lb.pp("s_ln_q"), attn.dim, trainable)?,
                    s_ln_kv: LayerNorm::new(&lb.pp("s_ln_kv"), attn.dim, trainable)?,
                    s_attn: MultiHeadAttention::new(&lb.pp("s_attn"), attn, trainable)?,
                    s_ln_mlp: LayerNorm::new(&lb.pp("s_ln_mlp"), attn.dim, trainable)?,
                    s_mlp: Mlp::new(&lb.pp("s_mlp"), attn.dim, hidden, trainable)?,
                    d_ln_q: LayerNorm::new(&lb.pp("d_ln_q"), attn.dim, trainable)?,
                    d_ln_kv: LayerNorm::new(&lb.pp("d_ln_kv"), attn.dim, trainable)?,
                    d_attn: MultiHeadAttention::new(&lb.pp("d_attn"), attn, trainable)?,
                    d_ln_mlp: LayerNorm::new(&lb.pp("d_ln_mlp"), attn.dim, trainable)?,
                    d_mlp: Mlp::new(&lb.pp("d_mlp"), attn.dim, hidden, trainable)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TwoWayTransformer { layers })
    }

    /// `sparse [B, Ls, D]`, `dense [B, Ld, D]`, `dense_pe` broadcastable to
    /// the dense shape (`[Ld, D]` or `[B, Ld, D]`). `sparse_valid` masks
    /// sparse tokens when they act as keys; invalid sparse query rows are
    /// the caller's business (they get zeroed downstream).
    pub fn forward(
        &self,
        sparse: &Tensor<E>,
        dense: &Tensor<E>,
        dense_pe: &Tensor<E>,
        sparse_valid: Option<&[bool]>,
        canonical_dense_reads: bool,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut s = sparse.clone();
        let mut d = dense.clone();
        for layer in &self.layers {
            let d_pe = d.add(dense_pe)?;
            let kv = layer.s_ln_kv.forward(&d_pe)?;
            let s_q = layer.s_ln_q.forward(&s)?;
            let s_upd = layer.s_attn.forward(&s_q, &kv, &kv, None, false, None)?;
            s = s.add(&s_upd)?;
            s = s.add(&layer.s_mlp.forward(&layer.s_ln_mlp.forward(&s)?)?)?;

            let d_pe = d.add(dense_pe)?;
            let d_q = layer.d_ln_q.forward(&d_pe)?;
            let s_kv = layer.d_ln_kv.forward(&s)?;
            let d_upd = layer.d_attn.forward(
                &d_q,
                &s_kv,
                &s_kv,
                sparse_valid,
                canonical_dense_reads,
                None,
            )?;
            d = d.add(&d_upd)?;
            d = d.add(&layer.d_mlp.forward(&layer.d_ln_mlp.forward(&d)?)?)?;
        }
        Ok((s, d))
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

// ── random-Fourier positional embedding ───────────────────────────────────

/// SAM-style positional encoding: normalized coordinates are mapped through
/// a fixed Gaussian matrix and embedded as `[sin(2πt) ‖ cos(2πt)]`. The
/// matrix is stored (not trainable) so that checkpoints reproduce the exact
/// same encoding.
pub struct FourierPosEmbed<E: Element> {
    gauss: Tensor<E>, // [2, D/2]
    dim: usize,
}

impl<E: Element> FourierPosEmbed<E> {
    pub fn new(vb: &ParamBuilder<E>, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!("positional embedding dim {dim} must be even")));
        }
        let gauss = vb.get(&[2, dim / 2], "gauss", Init::TruncNormal(1.0), false)?;
        Ok(FourierPosEmbed { gauss, dim })
    }

    /// Embed `[K, 2]` normalized (x, y) coordinates in `[0, 1]²` → `[K, D]`.
    /// Pure constant math — positions are data, not graph nodes.
    pub fn encode(&self, coords: &[(f64, f64)]) -> Result<Tensor<E>> {
        let half = self.dim / 2;
        let g = self.gauss.data();
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut out = Vec::with_capacity(coords.len() * self.dim);
        for &(x, y) in coords {
            // map [0,1] -> [-1,1]
            let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
            for j in 0..half {
                let t = two_pi * (cx * g[j].to_f64() + cy * g[half + j].to_f64());
                out.push(E::from_f64(t.sin()));
            }
            for j in 0..half {
                let t = two_pi * (cx * g[j].to_f64() + cy * g[half + j].to_f64());
                out.push(E::from_f64(t.cos()));
            }
        }
        Tensor::from_vec(out, &[coords.len(), self.dim])
    }

    /// Embedding grid for an `h × w` feature map at cell centers → `[h·w, D]`.
    pub fn grid(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        let coords: Vec<(f64, f64)> = (0..h)
            .flat_map(|r| {
                (0..w).map(move |c| ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64))
            })
            .collect();
        self.encode(&coords)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn vb(seed: u64) -> ParamBuilder<f64> {
        ParamBuilder::new(ParamStore::new(), seed)
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let cfg = AttentionConfig {
            dim: 10,
            num_heads: 3,
            dropout_rate: 0.0,
        };
        assert!(MultiHeadAttention::new(&vb(0), cfg, true).is_err());
    }

    #[test]
    fn fully_masked_query_rows_come_out_exactly_zero() {
        let cfg = AttentionConfig {
            dim: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        };
        let b = vb(3);
        let attn = MultiHeadAttention::new(&b.pp("attn"), cfg, true).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 3, 8], |i| (i as f64 * 0.13).sin());
        let mask = vec![false, false, false];
        let y = attn.forward(&x, &x, &x, Some(&mask), false, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "no-valid-keys must yield exact zeros");
    }

    #[test]
    fn masked_keys_do_not_influence_output() {
        let cfg = AttentionConfig {
            dim: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        };
        let b = vb(4);
        let attn = MultiHeadAttention::new(&b.pp("attn"), cfg, true).unwrap();
        let q = Tensor::<f64>::from_fn(&[1, 2, 8], |i| (i as f64 * 0.07).cos());
        let k1 = Tensor::<f64>::from_fn(&[1, 3, 8], |i| (i as f64 * 0.11).sin());
        // Perturb only the masked key row.
        let mut k2d = k1.data().to_vec();
        for v in &mut k2d[8..16] {
            *v += 100.0;
        }
        let k2 = Tensor::from_vec(k2d, &[1, 3, 8]).unwrap();
        let mask = vec![true, false, true];
        let y1 = attn.forward(&q, &k1, &k1, Some(&mask), false, None).unwrap();
        let y2 = attn.forward(&q, &k2, &k2, Some(&mask), false, None).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_depth_zero_is_identity() {
        let b = vb(5);
        let cfg = AttentionConfig {
            dim: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        };
        let tw = TwoWayTransformer::new(&b.pp("tw"), 0, cfg, 2, true).unwrap();
        let s = Tensor::<f64>::from_fn(&[1, 2, 8], |i| i as f64);
        let d = Tensor::<f64>::from_fn(&[1, 4, 8], |i| -(i as f64));
        let pe = Tensor::<f64>::zeros(&[4, 8]);
        let (s2, d2) = tw.forward(&s, &d, &pe, None, false).unwrap();
        assert_eq!(s2.data(), s.data());
        assert_eq!(d2.data(), d.data());
    }

    #[test]
    fn two_way_with_zeroed_projections_is_identity() {
        let b = vb(6);
        let cfg = AttentionConfig {
            dim: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        };
        let tw = TwoWayTransformer::new(&b.pp("tw"), 2, cfg, 2, true).unwrap();
        let (mut store, _) = b.finish();
        // Zero every attention output projection and MLP second layer.
        for (name, p) in store.iter_mut() {
            if name.contains("attn.out.w") || name.contains("mlp.fc2") {
                p.data = std::sync::Arc::new(vec![0.0; p.data.len()]);
            }
        }
        let b2 = ParamBuilder::new(store, 6);
        let tw2 = TwoWayTransformer::new(&b2.pp("tw"), 2, cfg, 2, true).unwrap();
        let _ = tw;

        let s = Tensor::<f64>::from_fn(&[1, 2, 8], |i| (i as f64 * 0.3).sin());
        let d = Tensor::<f64>::from_fn(&[1, 4, 8], |i| (i as f64 * 0.17).cos());
        let pe = Tensor::<f64>::from_fn(&[4, 8], |i| (i as f64 * 0.05).sin());
        let (s2, d2) = tw2.forward(&s, &d, &pe, None, false).unwrap();
        for (a, b) in s2.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-12, "sparse stream must pass through");
        }
        for (a, b) in d2.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-12, "dense stream must pass through");
        }
    }

    #[test]
    fn fourier_embedding_is_deterministic_and_bounded() {
        let b = vb(7);
        let pe = FourierPosEmbed::<f64>::new(&b.pp("pe"), 16).unwrap();
        let e1 = pe.encode(&[(0.25, 0.75)]).unwrap();
        let e2 = pe.encode(&[(0.25, 0.75)]).unwrap();
        assert_eq!(e1.data(), e2.data());
        assert!(e1.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        // sin² + cos² = 1 per frequency
        let half = 8;
        for j in 0..half {
            let s = e1.data()[j];
            let c = e1.data()[half + j];
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
}
