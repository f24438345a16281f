//! Finite-difference verification of every composite network block, run in
//! `f64`. Parameters are built once per block with a seeded initializer and
//! held fixed; the checked inputs are the block's input activations, so each
//! check exercises the full chain rule through the block's graph. (The local
//! parameter gradients of each primitive — matmul, conv, norm — are already
//! finite-difference-checked on both operands in the tensor suite.)

use la_core::decoder::{DecoderConfig, MaskDecoder};
use la_core::nn::{AttentionConfig, MultiHeadAttention, TwoWayTransformer};
use la_core::params::{ParamBuilder, ParamStore};
use la_core::prompt::{PromptConfig, PromptEncoder, MASK_RES};
use la_core::rng::{stream_rng, Stream};
use la_core::tensor::gradcheck::{gradient_check_with, GradCheckReport};
use la_core::tensor::Tensor;
use la_core::train::{class_weights, focal_loss, WeightPolicy};
use la_core::Result;
use rand::Rng;

fn random_tensor(seed: u64, idx: u64, shape: &[usize], scale: f64) -> Result<Tensor<f64>> {
    let mut rng = stream_rng(seed, Stream::Init, idx);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(data, shape)
}

/// One-hot `[rows, window]` selector placing a window at `offset`.
fn selector(rows: usize, window: usize, offset: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; rows * window];
    for j in 0..window {
        data[(offset + j) * window + j] = 1.0;
    }
    Tensor::from_vec(data, &[rows, window])
}

/// One-hot `[window, cols]` selector placing a window at `offset`.
fn selector_t(window: usize, cols: usize, offset: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; window * cols];
    for j in 0..window {
        data[j * cols + offset + j] = 1.0;
    }
    Tensor::from_vec(data, &[window, cols])
}

fn check_attention(seed: u64, h: f64, tol: f64, inject: bool) -> Result<GradCheckReport> {
    let vb = ParamBuilder::<f64>::new(ParamStore::new(), seed);
    let attn = MultiHeadAttention::new(
        &vb.pp("attn"),
        AttentionConfig {
            dim: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        },
        true,
    )?;
    let q = random_tensor(seed, 10, &[2, 3, 8], 0.8)?;
    let k = random_tensor(seed, 11, &[2, 4, 8], 0.8)?;
    let v = random_tensor(seed, 12, &[2, 4, 8], 0.8)?;
    gradient_check_with(
        "attention",
        &[("q", q), ("k", k), ("v", v)],
        &|t| Ok(attn.forward(&t[0], &t[1], &t[2], None, false, None)?.sum_all()),
        h,
        tol,
        inject,
    )
}

fn check_two_way(seed: u64, h: f64, tol: f64, inject: bool) -> Result<GradCheckReport> {
    let vb = ParamBuilder::<f64>::new(ParamStore::new(), seed);
    let tw = TwoWayTransformer::new(
        &vb.pp("two_way"),
        2,
        AttentionConfig {
            dim: 8,
            num_heads: 2,
            dropout_rate: 0.0,
        },
        2,
        true,
    )?;
    let sparse = random_tensor(seed, 20, &[1, 3, 8], 0.8)?;
    let dense = random_tensor(seed, 21, &[1, 4, 8], 0.8)?;
    let pe = random_tensor(seed, 22, &[4, 8], 0.8)?;
    gradient_check_with(
        "two-way transformer",
        &[("sparse", sparse), ("dense", dense), ("dense_pe", pe)],
        &|t| {
            let (s, d) = tw.forward(&t[0], &t[1], &t[2], None, false)?;
            s.sum_all().add(&d.sum_all())
        },
        h,
        tol,
        inject,
    )
}

/// The strided mask CNN reads a full-resolution canvas, which is too many
/// coordinates to finite-difference one by one. Instead a small window is
/// embedded into a fixed random canvas through constant one-hot matmuls:
/// the analytic backward still flows through the entire conv stack, while
/// only the window's coordinates are perturbed numerically.
fn check_mask_downsampler(seed: u64, h: f64, tol: f64, inject: bool) -> Result<GradCheckReport> {
    let vb = ParamBuilder::<f64>::new(ParamStore::new(), seed);
    let enc = PromptEncoder::new(
        &vb.pp("prompt"),
        PromptConfig {
            dim: 8,
            max_points: 3,
            max_boxes: 2,
            num_heads: 2,
            two_way_depth: 1,
            mlp_ratio: 2,
            token_pool_size: 8,
            token_pool: true,
            mixer: true,
            grid: 32,
        },
    )?;
    let win = 8;
    let canvas = random_tensor(seed, 30, &[MASK_RES, MASK_RES], 0.5)?;
    let rows = selector(MASK_RES, win, 97)?;
    let cols = selector_t(win, MASK_RES, 141)?;
    let patch = random_tensor(seed, 31, &[win, win], 0.5)?;
    gradient_check_with(
        "mask downsampler",
        &[("patch", patch)],
        &|t| {
            let placed = rows.matmul(&t[0])?.matmul(&cols)?;
            let full = canvas.add(&placed)?.reshape(&[1, 1, MASK_RES, MASK_RES])?;
            Ok(enc.mask_conv_stack(&full)?.sum_all())
        },
        h,
        tol,
        inject,
    )
}

fn check_decoder(seed: u64, h: f64, tol: f64, inject: bool) -> Result<GradCheckReport> {
    let vb = ParamBuilder::<f64>::new(ParamStore::new(), seed);
    let dec = MaskDecoder::new(
        &vb.pp("decoder"),
        DecoderConfig {
            dim: 16,
            num_heads: 2,
            two_way_depth: 1,
            mlp_ratio: 2,
            grid: 4,
            quarter: 8,
            spatial_convs: true,
        },
    )?;
    let feats = random_tensor(seed, 40, &[16, 4, 4], 0.8)?;
    let protos = random_tensor(seed, 41, &[3, 16], 0.8)?;
    gradient_check_with(
        "mask decoder",
        &[("features", feats), ("prototypes", protos)],
        &|t| Ok(dec.decode(&t[0], &t[1])?.sum_all()),
        h,
        tol,
        inject,
    )
}

fn check_focal_loss(seed: u64, h: f64, tol: f64, inject: bool) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, Stream::Init, 50);
    let side = 6;
    let classes = 3;
    let labels: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..classes as u8)).collect();
    let weights = class_weights(WeightPolicy::Uniform, &labels, classes);
    let logits = random_tensor(seed, 51, &[classes, side, side], 1.5)?;
    gradient_check_with(
        "focal loss",
        &[("logits", logits)],
        &|t| focal_loss(&t[0], &labels, &weights, 2.0),
        h,
        tol,
        inject,
    )
}

/// Run every block check in a fixed order. With `inject` the analytic
/// gradient's sign is flipped inside the harness, so a healthy checker must
/// FAIL every block — that run proves the comparison has teeth.
pub fn run_all(seed: u64, h: f64, tol: f64, inject: bool) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_attention(seed, h, tol, inject)?,
        check_two_way(seed, h, tol, inject)?,
        check_mask_downsampler(seed, h, tol, inject)?,
        check_decoder(seed, h, tol, inject)?,
        check_focal_loss(seed, h, tol, inject)?,
    ])
}
