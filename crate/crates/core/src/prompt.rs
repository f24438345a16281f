//! Multi-prompt encoder: turns per-class point/box/mask annotations from K
//! support examples into one prototype vector per class.
//!
//! Pipeline per episode (L support examples, N classes, M sparse slots):
//!
//! 1. `encode_points` — points and box corners become positional embeddings
//!    plus a learned type embedding; a mask-presence token fills the last
//!    slot when the class has a mask prompt. Unused slots stay zero and are
//!    flagged invalid.
//! 2. `encode_mask` — the 256×256 binary mask runs through a strided CNN
//!    down to the feature grid; absent or empty masks become a learned
//!    no-mask embedding.
//! 3. `prompt_self_attention` — one residual self-attention layer over all
//!    N·M sparse tokens of an example (the only place sparse tokens from
//!    different classes meet, so it runs in canonical-summation mode).
//! 4. `apply_token_pool` — a distinct pool row per class is added to every
//!    sparse token and dense position of that class, disambiguating classes
//!    downstream.
//! 5. dense embeddings are combined with the support image features, then
//!    `two_way_transform` runs cross-attention per (example, class).
//! 6. `pool_class_examples` — spatial average of the dense stream gives one
//!    embedding per (class, example).
//! 7. `class_example_mixer` — self-attention across the K example slots of a
//!    class.
//! 8. `aggregate_prototypes` — masked mean over present examples.

use crate::nn::{AttentionConfig, FourierPosEmbed, LayerNorm, MultiHeadAttention, TwoWayTransformer};
use crate::params::{Init, ParamBuilder};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Deterministic pool-row assignment for an episode: each class id gets a
/// distinct row, and the mapping depends on the class *identity* rather than
/// its position, so reordering the classes of an episode reorders the
/// assignment with them.
pub fn pool_assignment_for_classes(
    seed: u64,
    episode_index: u64,
    class_ids: &[u32],
    pool_size: usize,
) -> Result<Vec<usize>> {
    let n = class_ids.len();
    if n >= pool_size {
        return Err(Error::Config(format!(
            "token pool has {pool_size} rows; needs more than the {n} episode classes"
        )));
    }
    let mut sorted: Vec<u32> = class_ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::Sampling("episode repeats a class id".into()));
    }
    let mut rng = stream_rng(seed, Stream::Pool, episode_index);
    let rows = rand::seq::index::sample(&mut rng, pool_size, n).into_vec();
    Ok(class_ids
        .iter()
        .map(|id| rows[sorted.binary_search(id).unwrap()])
        .collect())
}

/// Fixed input resolution for mask prompts.
pub const MASK_RES: usize = 256;

/// Prompts of one class in one support example. Coordinates are normalized
/// to `[0, 1]` (x right, y down). A class that does not appear in the
/// example carries `class_present = false` and empty prompts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptAnnotation {
    /// Row-major 256×256 binary mask (values 0/1), if a mask prompt exists.
    pub mask: Option<Vec<u8>>,
    pub points: Vec<(f32, f32)>,
    pub boxes: Vec<((f32, f32), (f32, f32))>,
    pub class_present: bool,
}

impl PromptAnnotation {
    pub fn absent() -> Self {
        PromptAnnotation::default()
    }

    /// True when the mask slot should be treated as "no mask": absent or
    /// all-zero.
    pub fn mask_is_empty(&self) -> bool {
        match &self.mask {
            None => true,
            Some(m) => m.iter().all(|&v| v == 0),
        }
    }
}

/// Sparse + dense embeddings for one support example.
pub struct PromptEmbeddings<E: Element> {
    /// `[N, M, D]` sparse tokens (invalid slots exactly zero).
    pub sparse: Tensor<E>,
    /// `[N, D, H_d, W_d]` dense embeddings.
    pub dense: Tensor<E>,
    /// `[N][M]` slot validity.
    pub validity: Vec<Vec<bool>>,
}

/// All embeddings for one episode, batched over the L support examples.
pub struct EpisodeEmbeddings<E: Element> {
    /// `[L, N, M, D]` sparse tokens.
    pub sparse: Tensor<E>,
    /// `[L, N, D, H_d, W_d]` dense embeddings, support features included.
    pub dense: Tensor<E>,
    /// `[L][N][M]` slot validity.
    pub validity: Vec<Vec<Vec<bool>>>,
    /// `[N][L]` class presence per example.
    pub presence: Vec<Vec<bool>>,
}

/// Trainable pool of class-disambiguation rows.
pub struct TokenPool<E: Element> {
    pub rows: Tensor<E>, // [R, D]
}

impl<E: Element> TokenPool<E> {
    pub fn size(&self) -> usize {
        self.rows.shape()[0]
    }
}

/// Final per-class prototypes for one episode.
pub struct PrototypeSet<E: Element> {
    /// `[N+1, D]`: row 0 is the learned background prototype.
    pub prototypes: Tensor<E>,
    /// `[N, L, D]` per-example class embeddings (pre-aggregation), used by
    /// the per-example prediction mode.
    pub per_example: Tensor<E>,
    /// `[N][L]` example presence.
    pub presence: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PromptConfig {
    /// Working dimension D (must match the encoder's out_dim).
    pub dim: usize,
    pub max_points: usize,
    pub max_boxes: usize,
    pub num_heads: usize,
    pub two_way_depth: usize,
    pub mlp_ratio: usize,
    /// Token pool row count R (must exceed the largest episode N).
    pub token_pool_size: usize,
    /// Ablation switches.
    pub token_pool: bool,
    pub mixer: bool,
    /// Feature grid side (H_d = W_d), equal to the encoder grid.
    pub grid: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            dim: 64,
            max_points: 10,
            max_boxes: 1,
            num_heads: 4,
            two_way_depth: 2,
            mlp_ratio: 2,
            token_pool_size: 64,
            token_pool: true,
            mixer: true,
            grid: 8,
        }
    }
}

impl PromptConfig {
    /// Sparse slot budget per (example, class): all points, two corners per
    /// box, one mask-presence token.
    pub fn slots(&self) -> usize {
        self.max_points + 2 * self.max_boxes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "prompt dim {} not divisible by heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.grid == 0 || !MASK_RES.is_multiple_of(self.grid) || !(MASK_RES / self.grid).is_power_of_two() {
            return Err(Error::Config(format!(
                "mask resolution {MASK_RES} must be a power-of-two multiple of the feature grid {}",
                self.grid
            )));
        }
        if self.token_pool_size < 2 {
            return Err(Error::Config("token pool needs at least 2 rows".into()));
        }
        Ok(())
    }

    fn mask_stages(&self) -> usize {
        (MASK_RES / self.grid).trailing_zeros() as usize
    }
}

pub struct PromptEncoder<E: Element> {
    pub cfg: PromptConfig,
    pe: FourierPosEmbed<E>,
    /// `[3, D]`: row 0 point, row 1 box top-left, row 2 box bottom-right.
    type_emb: Tensor<E>,
    mask_token: Tensor<E>, // [D]
    no_mask: Tensor<E>,    // [D]
    mask_convs: Vec<(Tensor<E>, Tensor<E>)>,
    self_attn: MultiHeadAttention<E>,
    /// Present only when the pool switch is on — a disabled pool allocates
    /// no parameters.
    pub pool: Option<TokenPool<E>>,
    two_way: TwoWayTransformer<E>,
    /// Present only when the mixer switch is on.
    mixer: Option<(LayerNorm<E>, MultiHeadAttention<E>)>,
    background: Tensor<E>, // [D]
}

impl<E: Element> PromptEncoder<E> {
    pub fn new(vb: &ParamBuilder<E>, cfg: PromptConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let attn_cfg = AttentionConfig {
            dim: d,
            num_heads: cfg.num_heads,
            dropout_rate: 0.0,
        };
        let pe = FourierPosEmbed::new(&vb.pp("pe"), d)?;
        let type_emb = vb.get(&[3, d], "type_emb", Init::TruncNormal(0.02), true)?;
        let mask_token = vb.get(&[d], "mask_token", Init::TruncNormal(0.02), true)?;
        let no_mask = vb.get(&[d], "no_mask", Init::TruncNormal(0.02), true)?;

        // Strided mask CNN: 1 -> 4 -> 8 -> ... -> D, kernel 2, stride 2.
        let stages = cfg.mask_stages();
        let mut channels = vec![1usize];
        let mut c = 4usize;
        for _ in 0..stages.saturating_sub(1) {
            channels.push(c.min(d));
            c *= 2;
        }
        channels.push(d);
        let mb = vb.pp("mask_cnn");
        let mask_convs = (0..stages)
            .map(|i| {
                let sb = mb.pp(format!("stage{i}"));
                Ok((
                    sb.get(&[channels[i + 1], channels[i], 2, 2], "w", Init::TruncNormal(0.02), true)?,
                    sb.get(&[channels[i + 1]], "b", Init::Zeros, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let self_attn = MultiHeadAttention::new(&vb.pp("self_attn"), attn_cfg, true)?;
        let pool = if cfg.token_pool {
            Some(TokenPool {
                rows: vb.get(&[cfg.token_pool_size, d], "pool", Init::TruncNormal(0.02), true)?,
            })
        } else {
            None
        };
        let two_way = TwoWayTransformer::new(
            &vb.pp("two_way"),
            cfg.two_way_depth,
            attn_cfg,
            cfg.mlp_ratio,
            true,
        )?;
        let mixer = if cfg.mixer {
            Some((
                LayerNorm::new(&vb.pp("mixer.ln"), d, true)?,
                MultiHeadAttention::new(&vb.pp("mixer.attn"), attn_cfg, true)?,
            ))
        } else {
            None
        };
        let background = vb.get(&[d], "background", Init::TruncNormal(0.02), true)?;

        Ok(PromptEncoder {
            cfg,
            pe,
            type_emb,
            mask_token,
            no_mask,
            mask_convs,
            self_attn,
            pool,
            two_way,
            mixer,
            background,
        })
    }

    /// Sparse tokens for one class in one example: `([M, D], [M] validity)`.
    /// Each point contributes `PE(p) + type₀`; each box contributes two
    /// corner tokens (`type₁`, `type₂`); a mask prompt contributes the
    /// learned mask-presence token. Remaining slots are exact zeros.
    pub fn encode_points(&self, ann: &PromptAnnotation) -> Result<(Tensor<E>, Vec<bool>)> {
        let m = self.cfg.slots();
        let d = self.cfg.dim;
        let mut validity = vec![false; m];
        // An absent class is ignored wholesale — its annotation fields may
        // hold anything without affecting the output.
        if !ann.class_present {
            return Ok((Tensor::zeros(&[m, d]), validity));
        }
        if ann.points.len() > self.cfg.max_points {
            return Err(Error::Config(format!(
                "{} points exceed the {}-point budget",
                ann.points.len(),
                self.cfg.max_points
            )));
        }
        if ann.boxes.len() > self.cfg.max_boxes {
            return Err(Error::Config(format!(
                "{} boxes exceed the {}-box budget",
                ann.boxes.len(),
                self.cfg.max_boxes
            )));
        }

        let mut coords: Vec<(f64, f64)> = Vec::new();
        let mut types: Vec<usize> = Vec::new();
        for &(x, y) in &ann.points {
            coords.push((x as f64, y as f64));
            types.push(0);
        }
        for &((x0, y0), (x1, y1)) in &ann.boxes {
            coords.push((x0 as f64, y0 as f64));
            types.push(1);
            coords.push((x1 as f64, y1 as f64));
            types.push(2);
        }
        let n_coord = coords.len();
        let has_mask = !ann.mask_is_empty();

        for v in validity.iter_mut().take(n_coord) {
            *v = true;
        }
        if has_mask {
            validity[m - 1] = true;
        }

        let mut parts: Vec<Tensor<E>> = Vec::new();
        if n_coord > 0 {
            let pe = self.pe.encode(&coords)?;
            let ty = self.type_emb.gather_rows(&types)?;
            parts.push(pe.add(&ty)?);
        }
        let pad = m - n_coord - 1;
        if pad > 0 {
            parts.push(Tensor::zeros(&[pad, d]));
        }
        // Mask-presence slot is always the last one.
        parts.push(if has_mask {
            self.mask_token.reshape(&[1, d])?
        } else {
            Tensor::zeros(&[1, d])
        });
        Ok((Tensor::cat(&parts, 0)?, validity))
    }

    /// Dense embedding for one class's mask prompt: `[D, H_d, W_d]`.
    /// Absent classes (whatever their annotation fields contain) and
    /// all-zero masks map to the learned no-mask embedding broadcast over
    /// the grid.
    pub fn encode_mask(&self, ann: &PromptAnnotation) -> Result<Tensor<E>> {
        let d = self.cfg.dim;
        let g = self.cfg.grid;
        if !ann.class_present || ann.mask_is_empty() {
            // no_mask ⊗ 1 over the grid.
            let ones = Tensor::full(&[1, g * g], E::ONE);
            return self
                .no_mask
                .reshape(&[d, 1])?
                .matmul(&ones)?
                .reshape(&[d, g, g]);
        }
        let mask = ann.mask.as_ref().unwrap();
        if mask.len() != MASK_RES * MASK_RES {
            return Err(Error::shape("encode_mask", MASK_RES * MASK_RES, mask.len()));
        }
        let data: Vec<E> = mask
            .iter()
            .map(|&v| if v != 0 { E::ONE } else { E::ZERO })
            .collect();
        let x = Tensor::from_vec(data, &[1, 1, MASK_RES, MASK_RES])?;
        self.mask_conv_stack(&x)
    }

    /// The strided downsampling CNN behind mask prompts, exposed on tensor
    /// inputs (`[1, 1, R, R]` → `[D, g, g]`) so it stays differentiable
    /// end to end.
    pub fn mask_conv_stack(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (d, g) = (self.cfg.dim, self.cfg.grid);
        let mut x = x.clone();
        let last = self.mask_convs.len() - 1;
        for (i, (w, b)) in self.mask_convs.iter().enumerate() {
            x = x.conv2d(w, Some(b), 2, 0)?;
            if i != last {
                x = x.gelu();
            }
        }
        x.reshape(&[d, g, g])
    }

    /// Build sparse+dense embeddings for one support example (`anns` holds
    /// one annotation per episode class).
    pub fn encode_example(&self, anns: &[PromptAnnotation]) -> Result<PromptEmbeddings<E>> {
        let n = anns.len();
        let (m, d, g) = (self.cfg.slots(), self.cfg.dim, self.cfg.grid);
        let mut sparse_parts = Vec::with_capacity(n);
        let mut dense_parts = Vec::with_capacity(n);
        let mut validity = Vec::with_capacity(n);
        for ann in anns {
            let (tok, valid) = self.encode_points(ann)?;
            sparse_parts.push(tok.reshape(&[1, m, d])?);
            dense_parts.push(self.encode_mask(ann)?.reshape(&[1, d, g, g])?);
            validity.push(valid);
        }
        Ok(PromptEmbeddings {
            sparse: Tensor::cat(&sparse_parts, 0)?,
            dense: Tensor::cat(&dense_parts, 0)?,
            validity,
        })
    }

    /// One residual self-attention layer over all N·M sparse tokens of each
    /// example: `sparse [L, N, M, D]` with `validity [L][N][M]`. Invalid
    /// slots are masked as keys and re-zeroed afterwards; if an example has
    /// no valid token at all the layer reduces to the residual.
    ///
    /// Tokens of *different classes* mix here, so the attention runs in
    /// canonical-summation mode: class order cannot perturb the result.
    pub fn prompt_self_attention(
        &self,
        sparse: &Tensor<E>,
        validity: &[Vec<Vec<bool>>],
    ) -> Result<Tensor<E>> {
        let (l, n, m, d) = (
            sparse.shape()[0],
            sparse.shape()[1],
            sparse.shape()[2],
            sparse.shape()[3],
        );
        let flat_valid: Vec<bool> = validity
            .iter()
            .flat_map(|ex| ex.iter().flat_map(|cls| cls.iter().copied()))
            .collect();
        if flat_valid.len() != l * n * m {
            return Err(Error::shape("prompt_self_attention", l * n * m, flat_valid.len()));
        }
        let tokens = sparse.reshape(&[l, n * m, d])?;
        let upd = self
            .self_attn
            .forward(&tokens, &tokens, &tokens, Some(&flat_valid), true, None)?;
        tokens
            .add(&upd)?
            .zero_rows(&flat_valid)?
            .reshape(&[l, n, m, d])
    }

    /// Add pool row `assignment[n]` to every sparse token and dense position
    /// of class `n`. Rows must be distinct and the pool must be strictly
    /// larger than N. Invalid sparse slots are re-zeroed so the pool row
    /// cannot leak through padding.
    pub fn apply_token_pool(
        &self,
        sparse: &Tensor<E>,
        dense: &Tensor<E>,
        assignment: &[usize],
        validity: &[Vec<Vec<bool>>],
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let (l, n, m, d) = (
            sparse.shape()[0],
            sparse.shape()[1],
            sparse.shape()[2],
            sparse.shape()[3],
        );
        let g = self.cfg.grid;
        if assignment.len() != n {
            return Err(Error::shape("apply_token_pool", n, assignment.len()));
        }
        let pool = self
            .pool
            .as_ref()
            .ok_or_else(|| Error::Config("token pool is disabled in this configuration".into()))?;
        if n >= pool.size() {
            return Err(Error::Config(format!(
                "token pool has {} rows; needs more than the {} episode classes",
                pool.size(),
                n
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !assignment.iter().all(|&r| seen.insert(r)) {
            return Err(Error::Config("token pool assignment has repeated rows".into()));
        }
        let rows = pool.rows.gather_rows(assignment)?; // [N, D]

        // sparse: [L, N, M, D] + rows[n] → permute so (N, D) is a suffix.
        let s = sparse
            .permute(&[0, 2, 1, 3])? // [L, M, N, D]
            .add(&rows)?
            .permute(&[0, 2, 1, 3])?;
        let flat_valid: Vec<bool> = validity
            .iter()
            .flat_map(|ex| ex.iter().flat_map(|cls| cls.iter().copied()))
            .collect();
        let s = s.zero_rows(&flat_valid)?;

        // dense: [L, N, D, g, g] + rows[n] broadcast over (g, g) and L.
        let ones = Tensor::full(&[1, g * g], E::ONE);
        let rows_grid = rows
            .reshape(&[n * d, 1])?
            .matmul(&ones)?
            .reshape(&[n, d, g, g])?;
        let dn = dense.add(&rows_grid)?;
        let _ = (l, m);
        Ok((s, dn))
    }

    /// Cross-attention between each class's sparse tokens and its dense
    /// grid, batched over (example, class) pairs.
    pub fn two_way_transform(
        &self,
        sparse: &Tensor<E>,
        dense: &Tensor<E>,
        validity: &[Vec<Vec<bool>>],
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let (l, n, m, d) = (
            sparse.shape()[0],
            sparse.shape()[1],
            sparse.shape()[2],
            sparse.shape()[3],
        );
        let g = self.cfg.grid;
        let s = sparse.reshape(&[l * n, m, d])?;
        // [L, N, D, g, g] -> [L*N, g*g, D]
        let dn = dense
            .reshape(&[l * n, d, g * g])?
            .permute(&[0, 2, 1])?;
        let pe_grid = self.pe.grid(g, g)?;
        let flat_valid: Vec<bool> = validity
            .iter()
            .flat_map(|ex| ex.iter().flat_map(|cls| cls.iter().copied()))
            .collect();
        let (s2, d2) = self
            .two_way
            .forward(&s, &dn, &pe_grid, Some(&flat_valid), false)?;
        let s2 = s2.reshape(&[l, n, m, d])?.zero_rows(&flat_valid)?;
        let d2 = d2
            .permute(&[0, 2, 1])?
            .reshape(&[l, n, d, g, g])?;
        Ok((s2, d2))
    }

    /// Spatial average of the dense stream: `[L, N, D, g, g] -> [N, L, D]`.
    pub fn pool_class_examples(&self, dense: &Tensor<E>) -> Result<Tensor<E>> {
        let (l, n, d) = (dense.shape()[0], dense.shape()[1], dense.shape()[2]);
        let g = self.cfg.grid;
        dense
            .reshape(&[l * n, d, g, g])?
            .global_average_pool()?
            .reshape(&[l, n, d])?
            .permute(&[1, 0, 2])
    }

    /// Self-attention across the L example slots of each class (pre-norm,
    /// residual). Absent examples are masked as keys and zeroed after.
    /// Disabled by config, this is the identity.
    pub fn class_example_mixer(
        &self,
        examples: &Tensor<E>,
        presence: &[Vec<bool>],
    ) -> Result<Tensor<E>> {
        let Some((mixer_ln, mixer_attn)) = &self.mixer else {
            return Ok(examples.clone());
        };
        let flat: Vec<bool> = presence.iter().flat_map(|p| p.iter().copied()).collect();
        if flat.len() != examples.shape()[0] * examples.shape()[1] {
            return Err(Error::shape(
                "class_example_mixer",
                (examples.shape()[0], examples.shape()[1]),
                flat.len(),
            ));
        }
        let x = mixer_ln.forward(examples)?;
        let upd = mixer_attn.forward(&x, &x, &x, Some(&flat), false, None)?;
        examples.add(&upd)?.zero_rows(&flat)
    }

    /// Masked mean over present examples: `[N, L, D] -> [N, D]`. A class
    /// with no present example (cannot happen in sampled episodes) yields a
    /// zero prototype rather than NaN.
    pub fn aggregate_prototypes(
        &self,
        examples: &Tensor<E>,
        presence: &[Vec<bool>],
    ) -> Result<Tensor<E>> {
        let (n, l, d) = (
            examples.shape()[0],
            examples.shape()[1],
            examples.shape()[2],
        );
        let mut weights = vec![E::ZERO; n * l];
        for (cls, row) in presence.iter().enumerate() {
            let count = row.iter().filter(|&&p| p).count();
            if count == 0 {
                continue;
            }
            let w = E::from_f64(1.0 / count as f64);
            for (i, &p) in row.iter().enumerate() {
                if p {
                    weights[cls * l + i] = w;
                }
            }
        }
        let w = Tensor::from_vec(weights, &[n, 1, l])?;
        w.matmul(examples)?.reshape(&[n, d])
    }

    /// Encode one episode's annotations into batched sparse/dense streams
    /// (support features already folded into the dense stream).
    pub fn embed_episode(
        &self,
        anns: &[Vec<PromptAnnotation>],
        support_feats: &Tensor<E>,
    ) -> Result<EpisodeEmbeddings<E>> {
        let l = anns.len();
        if l == 0 {
            return Err(Error::Sampling("episode with zero support examples".into()));
        }
        let n = anns[0].len();
        let (d, g) = (self.cfg.dim, self.cfg.grid);
        if support_feats.shape() != [l, d, g, g] {
            return Err(Error::shape("embed_episode", [l, d, g, g], support_feats.shape()));
        }

        let mut sparse_parts = Vec::with_capacity(l);
        let mut dense_parts = Vec::with_capacity(l);
        let mut validity: Vec<Vec<Vec<bool>>> = Vec::with_capacity(l);
        for (i, ex) in anns.iter().enumerate() {
            if ex.len() != n {
                return Err(Error::shape("embed_episode", n, ex.len()));
            }
            let emb = self.encode_example(ex)?;
            // dense + support features (broadcast over classes)
            let feats_i = support_feats.narrow(0, i, 1)?.reshape(&[d, g, g])?;
            let dense = emb.dense.add(&feats_i)?;
            sparse_parts.push(emb.sparse.reshape(&[1, n, self.cfg.slots(), d])?);
            dense_parts.push(dense.reshape(&[1, n, d, g, g])?);
            validity.push(emb.validity);
        }
        let presence: Vec<Vec<bool>> = (0..n)
            .map(|cls| (0..l).map(|i| anns[i][cls].class_present).collect())
            .collect();
        Ok(EpisodeEmbeddings {
            sparse: Tensor::cat(&sparse_parts, 0)?,
            dense: Tensor::cat(&dense_parts, 0)?,
            validity,
            presence,
        })
    }

    /// Run the attention/pooling pipeline on already-encoded embeddings.
    pub fn prototypes_from(
        &self,
        emb: &EpisodeEmbeddings<E>,
        pool_assignment: &[usize],
    ) -> Result<PrototypeSet<E>> {
        let d = self.cfg.dim;
        let mut sparse = self.prompt_self_attention(&emb.sparse, &emb.validity)?;
        let mut dense = emb.dense.clone();
        if self.cfg.token_pool {
            let (s, dn) = self.apply_token_pool(&sparse, &dense, pool_assignment, &emb.validity)?;
            sparse = s;
            dense = dn;
        }
        let (_, dense) = self.two_way_transform(&sparse, &dense, &emb.validity)?;
        let pooled = self.pool_class_examples(&dense)?;
        let mixed = self.class_example_mixer(&pooled, &emb.presence)?;
        let aggregated = self.aggregate_prototypes(&mixed, &emb.presence)?;
        let prototypes = Tensor::cat(&[self.background.reshape(&[1, d])?, aggregated], 0)?;
        Ok(PrototypeSet {
            prototypes,
            per_example: mixed,
            presence: emb.presence.clone(),
        })
    }

    /// Full prompt pipeline for one episode.
    ///
    /// * `anns[l][n]` — annotation of class `n` in support example `l`.
    /// * `support_feats` — `[L, D, g, g]` encoded support images.
    /// * `pool_assignment` — distinct pool row per class (ignored when the
    ///   token pool is disabled).
    pub fn forward(
        &self,
        anns: &[Vec<PromptAnnotation>],
        support_feats: &Tensor<E>,
        pool_assignment: &[usize],
    ) -> Result<PrototypeSet<E>> {
        let emb = self.embed_episode(anns, support_feats)?;
        self.prototypes_from(&emb, pool_assignment)
    }

    /// Background prototype `E₀` (used by the per-example prediction mode).
    pub fn background(&self) -> Result<Tensor<E>> {
        self.background.reshape(&[1, self.cfg.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamBuilder, ParamStore};

    fn small_cfg() -> PromptConfig {
        PromptConfig {
            dim: 16,
            max_points: 3,
            max_boxes: 1,
            num_heads: 2,
            two_way_depth: 1,
            mlp_ratio: 2,
            token_pool_size: 8,
            token_pool: true,
            mixer: true,
            grid: 4,
        }
    }

    fn enc(seed: u64) -> PromptEncoder<f64> {
        let vb = ParamBuilder::new(ParamStore::new(), seed);
        PromptEncoder::new(&vb.pp("prompt"), small_cfg()).unwrap()
    }

    fn full_mask() -> Vec<u8> {
        vec![1u8; MASK_RES * MASK_RES]
    }

    #[test]
    fn encode_points_layout_and_validity() {
        let e = enc(1);
        let ann = PromptAnnotation {
            mask: Some(full_mask()),
            points: vec![(0.5, 0.5), (0.25, 0.75)],
            boxes: vec![((0.1, 0.1), (0.9, 0.9))],
            class_present: true,
        };
        let (tok, valid) = e.encode_points(&ann).unwrap();
        // M = 3 + 2 + 1 = 6
        assert_eq!(tok.shape(), &[6, 16]);
        assert_eq!(valid, vec![true, true, true, true, false, true]);
        // padded slot is exact zeros
        assert!(tok.data()[4 * 16..5 * 16].iter().all(|&v| v == 0.0));
        // box corner tokens differ through their type embeddings
        let tl = &tok.data()[2 * 16..3 * 16];
        let br = &tok.data()[3 * 16..4 * 16];
        assert!(tl.iter().zip(br).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn encode_points_enforces_budgets() {
        let e = enc(1);
        let ann = PromptAnnotation {
            mask: None,
            points: vec![(0.1, 0.1); 4],
            boxes: vec![],
            class_present: true,
        };
        assert!(e.encode_points(&ann).is_err());
    }

    #[test]
    fn absent_class_encodes_to_zeros() {
        let e = enc(2);
        let (tok, valid) = e.encode_points(&PromptAnnotation::absent()).unwrap();
        assert!(tok.data().iter().all(|&v| v == 0.0));
        assert!(valid.iter().all(|&v| !v));
    }

    #[test]
    fn empty_and_missing_masks_use_no_mask_embedding() {
        let e = enc(3);
        let absent = e.encode_mask(&PromptAnnotation::absent()).unwrap();
        let zero = e
            .encode_mask(&PromptAnnotation {
                mask: Some(vec![0u8; MASK_RES * MASK_RES]),
                class_present: true,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(absent.data(), zero.data());
        // every grid cell carries the same no-mask vector
        let d = 16;
        let g = 4;
        for ch in 0..d {
            let base = absent.data()[ch * g * g];
            for i in 0..g * g {
                assert_eq!(absent.data()[ch * g * g + i], base);
            }
        }
    }

    #[test]
    fn real_mask_embedding_differs_from_no_mask() {
        let e = enc(4);
        let with = e
            .encode_mask(&PromptAnnotation {
                mask: Some(full_mask()),
                class_present: true,
                ..Default::default()
            })
            .unwrap();
        let without = e.encode_mask(&PromptAnnotation::absent()).unwrap();
        assert_eq!(with.shape(), &[16, 4, 4]);
        assert!(with
            .data()
            .iter()
            .zip(without.data())
            .any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn self_attention_with_single_valid_token_is_residual_plus_attention() {
        let e = enc(5);
        let m = e.cfg.slots();
        let sparse = Tensor::<f64>::from_fn(&[1, 1, m, 16], |i| (i as f64 * 0.03).sin());
        let mut validity = vec![vec![vec![false; m]]];
        validity[0][0][0] = true;
        let out = e.prompt_self_attention(&sparse, &validity).unwrap();
        // Invalid slots zeroed.
        for slot in 1..m {
            let row = &out.data()[slot * 16..(slot + 1) * 16];
            assert!(row.iter().all(|&v| v == 0.0));
        }
        // The valid slot changed (token + attention-to-itself).
        let row0: Vec<f64> = out.data()[0..16].to_vec();
        let in0 = &sparse.data()[0..16];
        assert!(row0.iter().zip(in0).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn self_attention_all_invalid_is_pure_residual() {
        let e = enc(6);
        let m = e.cfg.slots();
        let sparse = Tensor::<f64>::zeros(&[1, 2, m, 16]);
        let validity = vec![vec![vec![false; m]; 2]];
        let out = e.prompt_self_attention(&sparse, &validity).unwrap();
        assert_eq!(out.data(), sparse.data());
    }

    #[test]
    fn token_pool_rejects_small_pool_and_repeats() {
        let e = enc(7);
        let m = e.cfg.slots();
        let sparse = Tensor::<f64>::zeros(&[1, 8, m, 16]); // N = 8 = pool size
        let dense = Tensor::<f64>::zeros(&[1, 8, 16, 4, 4]);
        let validity = vec![vec![vec![false; m]; 8]];
        let err = e
            .apply_token_pool(&sparse, &dense, &[0, 1, 2, 3, 4, 5, 6, 7], &validity)
            .unwrap_err()
            .to_string();
        assert!(err.contains("pool"), "{err}");

        let sparse = Tensor::<f64>::zeros(&[1, 2, m, 16]);
        let dense = Tensor::<f64>::zeros(&[1, 2, 16, 4, 4]);
        let validity = vec![vec![vec![false; m]; 2]];
        assert!(e.apply_token_pool(&sparse, &dense, &[3, 3], &validity).is_err());
    }

    #[test]
    fn token_pool_adds_assigned_row_everywhere() {
        let e = enc(8);
        let m = e.cfg.slots();
        let sparse = Tensor::<f64>::zeros(&[1, 1, m, 16]);
        let dense = Tensor::<f64>::zeros(&[1, 1, 16, 4, 4]);
        let validity = vec![vec![vec![true; m]]];
        let (s, d) = e
            .apply_token_pool(&sparse, &dense, &[5], &validity)
            .unwrap();
        let row: Vec<f64> = e.pool.as_ref().unwrap().rows.data()[5 * 16..6 * 16].to_vec();
        for slot in 0..m {
            assert_eq!(&s.data()[slot * 16..(slot + 1) * 16], &row[..]);
        }
        for ch in 0..16 {
            for pix in 0..16 {
                assert_eq!(d.data()[ch * 16 + pix], row[ch]);
            }
        }
    }

    #[test]
    fn mixer_with_single_example_is_input_plus_self_attention() {
        let e = enc(9);
        let x = Tensor::<f64>::from_fn(&[2, 1, 16], |i| (i as f64 * 0.05).cos());
        let presence = vec![vec![true], vec![true]];
        let out = e.class_example_mixer(&x, &presence).unwrap();
        assert_eq!(out.shape(), x.shape());
        // residual structure: out - x equals the attention update, which for
        // a single slot is attention(token -> itself); just check it's not
        // the identity and not zero.
        let diff: f64 = out
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn mixer_permutes_with_example_order() {
        let e = enc(10);
        let l = 3;
        let x = Tensor::<f64>::from_fn(&[1, l, 16], |i| ((i * 13 % 29) as f64) * 0.1);
        let presence = vec![vec![true; l]];
        let out = e.class_example_mixer(&x, &presence).unwrap();

        // permute slots 0<->2
        let perm = [2usize, 1, 0];
        let mut xd = vec![0.0; x.numel()];
        for (new, &old) in perm.iter().enumerate() {
            xd[new * 16..(new + 1) * 16].copy_from_slice(&x.data()[old * 16..(old + 1) * 16]);
        }
        let xp = Tensor::from_vec(xd, &[1, l, 16]).unwrap();
        let outp = e.class_example_mixer(&xp, &presence).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let a = &outp.data()[new * 16..(new + 1) * 16];
            let b = &out.data()[old * 16..(old + 1) * 16];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "mixer must be permutation-equivariant");
            }
        }
    }

    #[test]
    fn aggregate_is_masked_mean() {
        let e = enc(11);
        let x = Tensor::<f64>::from_fn(&[1, 3, 16], |i| (i / 16) as f64 + 1.0); // slots: 1, 2, 3
        let presence = vec![vec![true, false, true]];
        let agg = e.aggregate_prototypes(&x, &presence).unwrap();
        assert_eq!(agg.shape(), &[1, 16]);
        for &v in agg.data() {
            assert!((v - 2.0).abs() < 1e-12); // mean of 1 and 3
        }
    }

    #[test]
    fn pool_assignment_follows_class_identity() {
        let a = pool_assignment_for_classes(9, 4, &[5, 2, 7], 64).unwrap();
        let b = pool_assignment_for_classes(9, 4, &[7, 5, 2], 64).unwrap();
        assert_eq!(a[0], b[1]); // class 5
        assert_eq!(a[1], b[2]); // class 2
        assert_eq!(a[2], b[0]); // class 7
        let mut uniq = a.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
        // different episode index → (almost surely) different rows
        let c = pool_assignment_for_classes(9, 5, &[5, 2, 7], 64).unwrap();
        assert_ne!(a, c);

        assert!(pool_assignment_for_classes(9, 4, &[1, 1], 64).is_err());
        assert!(pool_assignment_for_classes(9, 4, &[0, 1, 2], 3).is_err());
    }

    #[test]
    fn forward_produces_prototypes_with_background_row() {
        let e = enc(12);
        let (l, n, d, g) = (2usize, 2usize, 16usize, 4usize);
        let anns: Vec<Vec<PromptAnnotation>> = (0..l)
            .map(|_| {
                (0..n)
                    .map(|_| PromptAnnotation {
                        mask: Some(full_mask()),
                        points: vec![(0.3, 0.4)],
                        boxes: vec![],
                        class_present: true,
                    })
                    .collect()
            })
            .collect();
        let feats = Tensor::<f64>::from_fn(&[l, d, g, g], |i| (i as f64 * 0.001).sin());
        let protos = e.forward(&anns, &feats, &[0, 3]).unwrap();
        assert_eq!(protos.prototypes.shape(), &[n + 1, d]);
        assert_eq!(protos.per_example.shape(), &[n, l, d]);
        // background row equals the learned parameter
        let bg = e.background().unwrap();
        assert_eq!(&protos.prototypes.data()[0..d], bg.data());
    }
}
