//! Allocation-only core of the video outpainting pipeline.
//!
//! Everything here is pure computation: a small dense tensor engine with a
//! reverse-mode tape, the diffusion schedule and reverse update, the toy
//! video denoiser, low-rank adapters with spatially weighted insertion,
//! per-video adaptation, the masked outpainting sampler with noise regret,
//! overlapping-clip co-denoising for long videos, synthetic data and image
//! metrics, and a closed-form Gaussian oracle that certifies the sampler.
//!
//! File formats, configuration parsing and the command line live in the
//! `motia` crate, which depends on this one.
#![no_std]

extern crate alloc;

pub mod adaptation;
pub mod adapters;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod longvideo;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod oracle;
pub mod outpaint;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
