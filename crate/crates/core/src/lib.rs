//! Few-shot multi-prompt semantic segmentation, end to end on the CPU.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine over dense row-major
//!   tensors, generic over `f32`/`f64`, with the conv/attention/norm
//!   primitives the model needs and a finite-difference gradient checker.
//! * [`params`] — named parameter storage with builder-style binding, so the
//!   same construction code either initializes fresh weights or binds a
//!   loaded checkpoint.
//! * [`nn`], [`encoder`], [`prompt`], [`decoder`], [`model`] — the
//!   segmentation network: a small ViT image encoder with a convolutional
//!   neck, a multi-prompt encoder that turns point/box/mask annotations into
//!   per-class prototypes, and a mask decoder that scores every pixel
//!   against every prototype.
//! * [`data`] — synthetic shape dataset, dataset index files, and the
//!   episodic N-way K-shot sampler.
//! * [`train`], [`eval`] — focal-loss training with AdamW and a
//!   warmup/cosine schedule, checkpointing, and the micro-benchmark
//!   evaluation harness (foreground mIoU over sampled episodes).

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
