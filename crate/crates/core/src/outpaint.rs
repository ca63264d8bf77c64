//! Masked reverse diffusion with spatially weighted adapters and noise regret.
//!
//! Each reverse step computes a known branch by noising the source to the
//! next timestep and an unknown branch by one predicted-x0 update, then keeps
//! the known branch on the source footprint. Every `L` consumed plan steps
//! inside the regret window the merged state is re-noised `L` plan positions
//! back, at most `M` times in a row per position.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::adapters::{AdapterSet, Insertion, Rect, SaConfig};
use crate::denoiser::{ConditionInput, DenoiserNet};
use crate::error::{bail, Result};
use crate::rng::Streams;
use crate::schedule::{NoiseSchedule, SigmaMode, TimestepPlan};
use crate::tensor::Tensor;

/// Border expansion of a source video onto a larger canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Expansion {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Expansion {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutpaintSpec {
    pub expansion: Expansion,
    /// Source `(height, width)`.
    pub source: (usize, usize),
}

impl OutpaintSpec {
    pub fn new(source: (usize, usize), expansion: Expansion) -> Result<Self> {
        if source.0 == 0 || source.1 == 0 {
            bail!(Config, "empty source frame");
        }
        Ok(Self { expansion, source })
    }

    /// Canvas `(h', w')`.
    pub fn target(&self) -> (usize, usize) {
        let e = &self.expansion;
        (self.source.0 + e.top + e.bottom, self.source.1 + e.left + e.right)
    }

    /// Source footprint on the canvas.
    pub fn known_rect(&self) -> Rect {
        let e = &self.expansion;
        Rect {
            top: e.top,
            bottom: e.top + self.source.0,
            left: e.left,
            right: e.left + self.source.1,
        }
    }

    /// Canvas-sized map, true on the source footprint.
    pub fn known_map(&self) -> Vec<bool> {
        let (h, w) = self.target();
        let r = self.known_rect();
        (0..h * w).map(|i| r.contains(i / w, i % w)).collect()
    }

    /// The source placed on the canvas, zero outside its footprint.
    pub fn pad(&self, video: &Tensor) -> Result<Tensor> {
        let (t, d, h, w) = video.dims4()?;
        if (h, w) != self.source {
            bail!(Shape, "spec expects {:?} frames, video has {}x{}", self.source, h, w);
        }
        let (th, tw) = self.target();
        let (top, left) = (self.expansion.top, self.expansion.left);
        let mut out = vec![0.0f32; t * d * th * tw];
        for plane in 0..t * d {
            for r in 0..h {
                let src = &video.data()[(plane * h + r) * w..(plane * h + r + 1) * w];
                let dst = (plane * th + top + r) * tw + left;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        Tensor::new(&[t, d, th, tw], out)
    }

    /// The source footprint cut out of a canvas-sized video.
    pub fn crop(&self, canvas: &Tensor) -> Result<Tensor> {
        let (t, d, th, tw) = canvas.dims4()?;
        if (th, tw) != self.target() {
            bail!(Shape, "canvas is {}x{}, spec expects {:?}", th, tw, self.target());
        }
        let (h, w) = self.source;
        let (top, left) = (self.expansion.top, self.expansion.left);
        let mut out = Vec::with_capacity(t * d * h * w);
        for plane in 0..t * d {
            for r in 0..h {
                let s = (plane * th + top + r) * tw + left;
                out.extend_from_slice(&canvas.data()[s..s + w]);
            }
        }
        Tensor::new(&[t, d, h, w], out)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Guidance applies to the first this-many plan steps.
    pub guidance_window: usize,
    /// Jump length `L`.
    pub jump_length: usize,
    /// Repeat count `M`.
    pub repeats: usize,
    /// Regret fires only while at most this many plan steps have been
    /// consumed; `None` means the first half of the plan.
    pub regret_window: Option<usize>,
    /// Spatial decay constant `K`.
    pub decay: f64,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            guidance_scale: 1.0,
            guidance_window: 15,
            jump_length: 3,
            repeats: 4,
            regret_window: None,
            decay: 3.0,
            sigma_mode: SigmaMode::Deterministic,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jump_length == 0 {
            bail!(Config, "jump length must be at least 1");
        }
        if self.guidance_window > self.steps {
            bail!(Config, "guidance window {} exceeds {} steps", self.guidance_window, self.steps);
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            bail!(Config, "guidance scale must be finite and >= 0");
        }
        if !(self.decay >= 0.0) || !self.decay.is_finite() {
            bail!(Config, "decay constant must be finite and >= 0");
        }
        let window = self.effective_regret_window();
        if window >= self.steps && self.repeats > 0 {
            bail!(Config, "regret window {} must end before the last of {} steps", window, self.steps);
        }
        Ok(())
    }

    pub fn effective_regret_window(&self) -> usize {
        self.regret_window.unwrap_or(self.steps / 2)
    }
}

/// Element-wise `m * known + (1 - m) * unknown` over a per-pixel map.
pub fn merge_step(known: &Tensor, unknown: &Tensor, mask: &[bool]) -> Result<Tensor> {
    known.same_shape(unknown)?;
    let (_, _, h, w) = known.dims4()?;
    let hw = h * w;
    if mask.len() != hw {
        bail!(Shape, "mask has {} entries for {}x{} frames", mask.len(), h, w);
    }
    let data = known
        .data()
        .iter()
        .zip(unknown.data())
        .enumerate()
        .map(|(i, (&k, &u))| if mask[i % hw] { k } else { u })
        .collect();
    Tensor::new(known.shape(), data)
}

/// Re-noises a state at `from` to the noisier timestep `to`:
/// `sqrt(P) * v + sqrt(1 - P) * eps` with `P = prod_{i = from+1}^{to} alpha_i`.
pub fn renoise(v: &Tensor, from: usize, to: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    if to > sched.steps() {
        bail!(ScheduleBounds, "cannot re-noise to timestep {} of a {}-step schedule", to, sched.steps());
    }
    if to < from {
        bail!(Config, "re-noising must move forward in time, got {} -> {}", from, to);
    }
    let p = sched.alpha_product(from, to);
    let (a, b) = (libm::sqrt(p) as f32, libm::sqrt(1.0 - p) as f32);
    v.zip_map(eps, |x, e| a * x + b * e)
}

/// One regret jump of `L` unit timesteps from `t`.
pub fn regret_jump(v_t: &Tensor, t: usize, jump: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    if t + jump > sched.steps() {
        bail!(ScheduleBounds, "jump {} + {} beyond schedule length {}", t, jump, sched.steps());
    }
    renoise(v_t, t, t + jump, sched, eps)
}

/// `uncond + s * (cond - uncond)`; `s == 1` is a single conditional pass.
pub fn guided_noise(
    net: &DenoiserNet,
    adapters: Option<&AdapterSet>,
    v_t: &Tensor,
    cond: &ConditionInput,
    t: usize,
    scale: f64,
    insertion: &Insertion,
) -> Result<Tensor> {
    if !(scale >= 0.0) {
        bail!(Config, "guidance scale must be >= 0");
    }
    let c = net.predict_noise(adapters, v_t, cond, t, insertion)?;
    if scale == 1.0 {
        return Ok(c);
    }
    let uncond = ConditionInput::unconditional(v_t.shape())?;
    let u = net.predict_noise(adapters, v_t, &uncond, t, insertion)?;
    let s = scale as f32;
    u.zip_map(&c, |u, c| u + s * (c - u))
}

/// The unknown branch of one reverse step.
pub trait ReverseModel {
    /// State at `t_prev` from the state `v_t` at `t`; `step` is the plan position.
    fn unknown_step(
        &self,
        v_t: &Tensor,
        t: usize,
        t_prev: usize,
        sigma: f64,
        z: &Tensor,
        step: usize,
    ) -> Result<Tensor>;
}

/// Noise predictor used by [`PredictorModel`].
pub trait NoisePredictor {
    fn predict(&self, v_t: &Tensor, t: usize, step: usize) -> Result<Tensor>;
}

/// Wraps a noise predictor into the predicted-x0 reverse update and counts calls.
pub struct PredictorModel<'a, P> {
    pub predictor: P,
    pub sched: &'a NoiseSchedule,
    evaluations: Cell<usize>,
}

impl<'a, P: NoisePredictor> PredictorModel<'a, P> {
    pub fn new(predictor: P, sched: &'a NoiseSchedule) -> Self {
        Self {
            predictor,
            sched,
            evaluations: Cell::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }
}

impl<P: NoisePredictor> ReverseModel for PredictorModel<'_, P> {
    fn unknown_step(&self, v_t: &Tensor, t: usize, t_prev: usize, sigma: f64, z: &Tensor, step: usize) -> Result<Tensor> {
        self.evaluations.set(self.evaluations.get() + 1);
        let eps = self.predictor.predict(v_t, t, step)?;
        self.sched.ddim_step(v_t, &eps, t, t_prev, sigma, z)
    }
}

/// The denoiser with its condition, adapters and guidance schedule.
pub struct NetPredictor<'a> {
    pub net: &'a DenoiserNet,
    pub adapters: Option<&'a AdapterSet>,
    pub cond: ConditionInput,
    pub insertion: Insertion,
    pub guidance_scale: f64,
    pub guidance_window: usize,
    passes: Cell<usize>,
}

impl<'a> NetPredictor<'a> {
    pub fn new(
        net: &'a DenoiserNet,
        adapters: Option<&'a AdapterSet>,
        cond: ConditionInput,
        insertion: Insertion,
        guidance_scale: f64,
        guidance_window: usize,
    ) -> Self {
        Self {
            net,
            adapters,
            cond,
            insertion,
            guidance_scale,
            guidance_window,
            passes: Cell::new(0),
        }
    }

    /// Network forward passes so far; two per guided step.
    pub fn passes(&self) -> usize {
        self.passes.get()
    }
}

impl NoisePredictor for NetPredictor<'_> {
    fn predict(&self, v_t: &Tensor, t: usize, step: usize) -> Result<Tensor> {
        let s = if step < self.guidance_window { self.guidance_scale } else { 1.0 };
        self.passes.set(self.passes.get() + if s == 1.0 { 1 } else { 2 });
        guided_noise(self.net, self.adapters, v_t, &self.cond, t, s, &self.insertion)
    }
}

/// One merged reverse step as seen by an observer.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub known_branch: &'a Tensor,
    pub merged: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Clamped to `[0, 1]`.
    pub video: Tensor,
    /// Final state before clamping.
    pub raw: Tensor,
    /// Reverse updates performed, including re-descents.
    pub reverse_steps: usize,
    pub regrets: usize,
}

/// Draw addresses used by the sampler loop.
pub mod streams {
    pub const INIT: &str = "sampler/init";
    pub const KNOWN: &str = "sampler/known";
    pub const Z: &str = "sampler/z";
    pub const REGRET: &str = "sampler/regret";
}

/// Runs the masked reverse loop from pure noise.
///
/// `source` is the canvas-sized source with unknown pixels zero; `known` is
/// the canvas-sized footprint map.
pub fn sample(
    model: &dyn ReverseModel,
    source: &Tensor,
    known: &[bool],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut observer: Option<&mut dyn FnMut(&StepRecord<'_>)>,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let (_, _, h, w) = source.dims4()?;
    if known.len() != h * w {
        bail!(Shape, "known map has {} entries for {}x{} canvas", known.len(), h, w);
    }
    let plan = TimestepPlan::new(sched, cfg.steps, cfg.sigma_mode)?;
    let n = plan.len();
    let window = cfg.effective_regret_window();
    let (jump, repeats) = (cfg.jump_length, cfg.repeats);
    let seeds = Streams::new(cfg.seed);
    let shape = source.shape();
    let zeros = Tensor::zeros(shape)?;

    let mut v = Tensor::randn_from(shape, &mut seeds.at(streams::INIT, 0))?;
    let (mut k, mut m, mut iter, mut regrets) = (0usize, 0usize, 0u64, 0usize);
    while k < n {
        let t = plan.at(k);
        let t_prev = plan.at(k + 1);
        let last = t_prev == 0;
        let eps = if last {
            zeros.clone()
        } else {
            Tensor::randn_from(shape, &mut seeds.at(streams::KNOWN, iter))?
        };
        let known_branch = sched.forward_noise(source, t_prev, &eps)?;
        let z = if last {
            zeros.clone()
        } else {
            Tensor::randn_from(shape, &mut seeds.at(streams::Z, iter))?
        };
        let unknown = model.unknown_step(&v, t, t_prev, plan.sigmas()[k], &z, k)?;
        v = merge_step(&known_branch, &unknown, known)?;
        if !v.all_finite() {
            bail!(Numeric, "non-finite sampler state at step {}", k);
        }
        if let Some(obs) = observer.as_mut() {
            obs(&StepRecord {
                step: k,
                t,
                t_prev,
                known_branch: &known_branch,
                merged: &v,
            });
        }
        iter += 1;
        let consumed = k + 1;
        if consumed % jump == 0 && consumed <= window {
            if m < repeats {
                let back = consumed - jump;
                let eps = Tensor::randn_from(shape, &mut seeds.at(streams::REGRET, regrets as u64))?;
                v = renoise(&v, t_prev, plan.at(back), sched, &eps)?;
                k = back;
                m += 1;
                regrets += 1;
                continue;
            }
            m = 0;
        }
        k += 1;
    }
    Ok(SampleOutput {
        video: v.map(|x| x.clamp(0.0, 1.0)),
        raw: v,
        reverse_steps: iter as usize,
        regrets,
    })
}

/// Reverse-step count of the loop skeleton, without doing any numerics.
pub fn scheduled_reverse_steps(cfg: &SamplerConfig) -> usize {
    let window = cfg.effective_regret_window();
    let (mut k, mut m, mut count) = (0usize, 0usize, 0usize);
    while k < cfg.steps {
        count += 1;
        let consumed = k + 1;
        if consumed % cfg.jump_length == 0 && consumed <= window {
            if m < cfg.repeats {
                k = consumed - cfg.jump_length;
                m += 1;
                continue;
            }
            m = 0;
        }
        k += 1;
    }
    count
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutpaintOutput {
    pub video: Tensor,
    pub reverse_steps: usize,
    pub network_passes: usize,
    pub regrets: usize,
    pub identity: bool,
    pub used_adapters: bool,
}

/// Expands `video` per `spec`, keeping the source pixels exactly.
pub fn outpaint(
    video: &Tensor,
    spec: &OutpaintSpec,
    net: &DenoiserNet,
    adapters: Option<&AdapterSet>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<OutpaintOutput> {
    cfg.validate()?;
    let source = spec.pad(video)?;
    let known = spec.known_map();
    let cond = ConditionInput::from_video(&source, &known)?;
    let insertion = match adapters {
        Some(_) => Insertion::SpatialAware(SaConfig::new(cfg.decay, spec.known_rect(), spec.target())?),
        None => Insertion::Full,
    };
    let predictor = NetPredictor::new(net, adapters, cond, insertion, cfg.guidance_scale, cfg.guidance_window);
    let model = PredictorModel::new(predictor, sched);
    let out = sample(&model, &source, &known, sched, cfg, None)?;
    Ok(OutpaintOutput {
        video: out.video,
        reverse_steps: out.reverse_steps,
        network_passes: model.predictor.passes(),
        regrets: out.regrets,
        identity: spec.expansion.is_identity(),
        used_adapters: adapters.is_some(),
    })
}

/// Replicates the outermost source pixels into the expanded border.
pub fn border_replicate(video: &Tensor, spec: &OutpaintSpec) -> Result<Tensor> {
    let (t, d, h, w) = video.dims4()?;
    if (h, w) != spec.source {
        bail!(Shape, "spec expects {:?} frames, video has {}x{}", spec.source, h, w);
    }
    let (th, tw) = spec.target();
    let (top, left) = (spec.expansion.top, spec.expansion.left);
    Tensor::from_fn(&[t, d, th, tw], |i| {
        let plane = i / (th * tw);
        let r = (i / tw) % th;
        let c = i % tw;
        let sr = (r as i64 - top as i64).clamp(0, h as i64 - 1) as usize;
        let sc = (c as i64 - left as i64).clamp(0, w as i64 - 1) as usize;
        video.data()[(plane * h + sr) * w + sc]
    })
}
