//! Per-video adaptation of low-rank adapters on pseudo-outpainting.
//!
//! Each iteration augments the source, masks a random border of it, noises
//! it at a uniform timestep and regresses the noise with the base frozen.

use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::{init_adapters, AdapterSet, Insertion, Rect};
use crate::denoiser::{bind_adapters, noise_loss, ConditionInput, DenoiserNet};
use crate::error::{bail, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{CounterRng, Streams};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Largest margin per side as a fraction of that dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MarginLimits {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl MarginLimits {
    pub fn uniform(limit: f64) -> Result<Self> {
        let l = Self {
            top: limit,
            bottom: limit,
            left: limit,
            right: limit,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.top, self.bottom, self.left, self.right] {
            if !(0.0..0.5).contains(&v) {
                bail!(Config, "margin limit {} outside [0, 0.5)", v);
            }
        }
        Ok(())
    }
}

impl Default for MarginLimits {
    fn default() -> Self {
        Self {
            top: 0.45,
            bottom: 0.45,
            left: 0.45,
            right: 0.45,
        }
    }
}

/// Border margins of a frame; the interior is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryMask {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundaryMask {
    pub fn new(height: usize, width: usize, top: usize, bottom: usize, left: usize, right: usize) -> Result<Self> {
        if top + bottom >= height || left + right >= width {
            bail!(Config, "margins ({}, {}, {}, {}) leave nothing of a {}x{} frame", top, bottom, left, right, height, width);
        }
        Ok(Self {
            top,
            bottom,
            left,
            right,
            height,
            width,
        })
    }

    pub fn known_rect(&self) -> Rect {
        Rect {
            top: self.top,
            bottom: self.height - self.bottom,
            left: self.left,
            right: self.width - self.right,
        }
    }

    /// Row-major `h * w` map, true where known.
    pub fn known_map(&self) -> Vec<bool> {
        let r = self.known_rect();
        (0..self.height * self.width).map(|i| r.contains(i / self.width, i % self.width)).collect()
    }

    /// `[h, w]` tensor with 1 on known pixels.
    pub fn mask_tensor(&self) -> Tensor {
        let map = self.known_map();
        Tensor::new(&[self.height, self.width], map.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
            .expect("extents are positive")
    }
}

/// Each margin uniform over `0..=floor(limit * dim)`.
pub fn random_boundary_mask(h: usize, w: usize, limits: &MarginLimits, rng: &mut CounterRng) -> Result<BoundaryMask> {
    limits.validate()?;
    let cap = |l: f64, n: usize| libm::floor(l * n as f64) as usize;
    let top = rng.range_inclusive(0, cap(limits.top, h));
    let bottom = rng.range_inclusive(0, cap(limits.bottom, h));
    let left = rng.range_inclusive(0, cap(limits.left, w));
    let right = rng.range_inclusive(0, cap(limits.right, w));
    BoundaryMask::new(h, w, top, bottom, left, right)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    Identity,
    HorizontalFlip,
    CropResize,
}

/// Probabilities of each augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AugmentPolicy {
    pub identity: f64,
    pub horizontal_flip: f64,
    pub crop_resize: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            identity: 1.0,
            horizontal_flip: 0.0,
            crop_resize: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let p = [self.identity, self.horizontal_flip, self.crop_resize];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!(Config, "augmentation probabilities {:?} must lie in [0, 1] and sum to 1", p);
        }
        Ok(())
    }

    pub fn choose(&self, rng: &mut CounterRng) -> Augmentation {
        let u = rng.uniform();
        if u < self.identity {
            Augmentation::Identity
        } else if u < self.identity + self.horizontal_flip {
            Augmentation::HorizontalFlip
        } else {
            Augmentation::CropResize
        }
    }
}

pub fn hflip(video: &Tensor) -> Result<Tensor> {
    let (_, _, _, w) = video.dims4()?;
    let mut out = video.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Crops `rect` from every plane and resizes it back bilinearly, aligning corners.
pub fn crop_resize(video: &Tensor, rect: Rect) -> Result<Tensor> {
    let (t, d, h, w) = video.dims4()?;
    if rect.bottom > h || rect.right > w || rect.top >= rect.bottom || rect.left >= rect.right {
        bail!(Config, "crop {:?} outside {}x{} frame", rect, h, w);
    }
    let (ch, cw) = (rect.bottom - rect.top, rect.right - rect.left);
    let coord = |i: usize, n: usize, cn: usize, start: usize| -> (usize, usize, f64) {
        let s = if n == 1 { 0.0 } else { i as f64 * (cn - 1) as f64 / (n - 1) as f64 };
        let lo = libm::floor(s) as usize;
        let hi = (lo + 1).min(cn - 1);
        (start + lo, start + hi, s - lo as f64)
    };
    let mut out = vec![0.0f32; video.len()];
    let src = video.data();
    for plane in 0..t * d {
        let base = plane * h * w;
        for r in 0..h {
            let (r0, r1, fr) = coord(r, h, ch, rect.top);
            for c in 0..w {
                let (c0, c1, fc) = coord(c, w, cw, rect.left);
                let at = |rr: usize, cc: usize| src[base + rr * w + cc] as f64;
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out[base + r * w + c] = (top * (1.0 - fr) + bot * fr) as f32;
            }
        }
    }
    Tensor::new(video.shape(), out)
}

/// Applies one augmentation drawn from `policy`.
pub fn augment(video: &Tensor, policy: &AugmentPolicy, rng: &mut CounterRng) -> Result<Tensor> {
    policy.validate()?;
    match policy.choose(rng) {
        Augmentation::Identity => Ok(video.clone()),
        Augmentation::HorizontalFlip => hflip(video),
        Augmentation::CropResize => {
            let (_, _, h, w) = video.dims4()?;
            let ch = rng.range_inclusive(h.div_ceil(2), h);
            let cw = rng.range_inclusive(w.div_ceil(2), w);
            let top = rng.range_inclusive(0, h - ch);
            let left = rng.range_inclusive(0, w - cw);
            crop_resize(video, Rect::new(top, top + ch, left, left + cw)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdaptConfig {
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub rank: usize,
    pub alpha_lora: f32,
    pub limits: MarginLimits,
    pub augment: AugmentPolicy,
    /// Sources longer than this are adapted on random contiguous clips.
    pub clip_length: usize,
    /// Restrict the loss to masked pixels.
    pub masked_only: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            optimizer: AdamConfig::default(),
            rank: 16,
            alpha_lora: 8.0,
            limits: MarginLimits::default(),
            augment: AugmentPolicy::default(),
            clip_length: 16,
            masked_only: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.limits.validate()?;
        self.augment.validate()?;
        if self.clip_length == 0 {
            bail!(Config, "clip length must be at least 1");
        }
        Ok(())
    }
}

/// The random draws of one adaptation iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationDraws {
    pub clip_start: usize,
    pub video: Tensor,
    pub mask: BoundaryMask,
    pub t: usize,
    pub eps: Tensor,
}

/// Reproducible draws for `iteration` under `seed`.
pub fn iteration_draws(
    video: &Tensor,
    cfg: &AdaptConfig,
    sched: &NoiseSchedule,
    seed: u64,
    iteration: u64,
) -> Result<IterationDraws> {
    let (frames, _, h, w) = video.dims4()?;
    let streams = Streams::new(seed);
    let clip_start = if frames > cfg.clip_length {
        streams.at("adapt/clip", iteration).range_inclusive(0, frames - cfg.clip_length)
    } else {
        0
    };
    let clip = if frames > cfg.clip_length {
        video.slice_leading(clip_start, clip_start + cfg.clip_length)?
    } else {
        video.clone()
    };
    let clip = augment(&clip, &cfg.augment, &mut streams.at("adapt/augment", iteration))?;
    let mask = random_boundary_mask(h, w, &cfg.limits, &mut streams.at("adapt/mask", iteration))?;
    let t = streams.at("adapt/t", iteration).range_inclusive(1, sched.steps());
    let eps = Tensor::randn_from(clip.shape(), &mut streams.at("adapt/eps", iteration))?;
    Ok(IterationDraws {
        clip_start,
        video: clip,
        mask,
        t,
        eps,
    })
}

/// Pseudo-outpainting loss of `adapters` on one set of draws, without gradients.
pub fn pseudo_outpaint_loss(
    net: &DenoiserNet,
    adapters: Option<&AdapterSet>,
    draws: &IterationDraws,
    masked_only: bool,
    sched: &NoiseSchedule,
) -> Result<f32> {
    let noisy = sched.forward_noise(&draws.video, draws.t, &draws.eps)?;
    let known = draws.mask.known_map();
    let cond = ConditionInput::from_video(&draws.video, &known)?;
    let pred = net.predict_noise(adapters, &noisy, &cond, draws.t, &Insertion::Full)?;
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let loss = noise_loss(&mut tape, p, &draws.eps, masked_only.then_some(known.as_slice()))?;
    Ok(tape.value(loss).data()[0])
}

/// One optimisation step of the adapters. Base parameters stay on the tape as constants.
pub fn adaptation_step(
    net: &DenoiserNet,
    adapters: &mut AdapterSet,
    adam: &mut AdamState,
    draws: &IterationDraws,
    masked_only: bool,
    sched: &NoiseSchedule,
) -> Result<f32> {
    let noisy = sched.forward_noise(&draws.video, draws.t, &draws.eps)?;
    let known = draws.mask.known_map();
    let cond = ConditionInput::from_video(&draws.video, &known)?;

    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let bound = bind_adapters(&mut tape, adapters, true);
    let pred = net.forward(&mut tape, &params, Some(&bound), &Insertion::Full, &noisy, &cond, draws.t)?;
    let loss = noise_loss(&mut tape, pred, &draws.eps, masked_only.then_some(known.as_slice()))?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        bail!(Numeric, "adaptation loss is {}", value);
    }
    tape.backward(loss)?;

    let mut grads: Vec<Vec<f32>> = Vec::with_capacity(2 * adapters.len());
    for (_, &(down, up, _)) in bound.iter() {
        for v in [down, up] {
            let n = tape.value(v).len();
            grads.push(tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; n]));
        }
    }
    let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    let mut param_refs: Vec<&mut [f32]> = Vec::with_capacity(grads.len());
    for (_, a) in adapters.iter_mut() {
        param_refs.push(a.down.data_mut());
        param_refs.push(a.up.data_mut());
    }
    adam.step(&mut param_refs, &grad_refs)?;
    Ok(value)
}

/// Buffer lengths of an adapter set in optimiser order.
pub fn adapter_buffer_lengths(set: &AdapterSet) -> Vec<usize> {
    set.iter().flat_map(|(_, a)| [a.down.len(), a.up.len()]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub adapters: AdapterSet,
    pub losses: Vec<f32>,
}

/// Fresh adapters trained for `cfg.iterations` steps on `video`.
pub fn adapt(
    net: &DenoiserNet,
    video: &Tensor,
    cfg: &AdaptConfig,
    sched: &NoiseSchedule,
    mut on_iteration: impl FnMut(usize, f32),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let adapters = init_adapters(net, cfg.rank, cfg.alpha_lora, cfg.seed)?;
    adapt_from(net, adapters, video, cfg, sched, &mut on_iteration)
}

/// Continues training the given adapters.
pub fn adapt_from(
    net: &DenoiserNet,
    mut adapters: AdapterSet,
    video: &Tensor,
    cfg: &AdaptConfig,
    sched: &NoiseSchedule,
    mut on_iteration: impl FnMut(usize, f32),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    adapters.validate_for(net)?;
    let mut adam = AdamState::new(cfg.optimizer.clone(), &adapter_buffer_lengths(&adapters));
    let mut losses = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let draws = iteration_draws(video, cfg, sched, cfg.seed, i as u64)?;
        let loss = adaptation_step(net, &mut adapters, &mut adam, &draws, cfg.masked_only, sched)?;
        losses.push(loss);
        on_iteration(i, loss);
    }
    Ok(AdaptOutcome { adapters, losses })
}

/// Mean pseudo-outpainting loss of two adapter sets on the same `n` fresh draws.
pub fn paired_held_out_loss(
    net: &DenoiserNet,
    a: Option<&AdapterSet>,
    b: Option<&AdapterSet>,
    video: &Tensor,
    cfg: &AdaptConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n == 0 {
        bail!(Config, "held-out evaluation needs at least one draw");
    }
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..n {
        let draws = iteration_draws(video, cfg, sched, seed, i as u64)?;
        sa += pseudo_outpaint_loss(net, a, &draws, cfg.masked_only, sched)? as f64;
        sb += pseudo_outpaint_loss(net, b, &draws, cfg.masked_only, sched)? as f64;
    }
    Ok((sa / n as f64, sb / n as f64))
}
