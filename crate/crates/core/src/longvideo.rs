//! Long videos as overlapping clips merged every reverse step.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cell::Cell;
use core::ops::Range;

use crate::adapters::{AdapterSet, Insertion, SaConfig};
use crate::denoiser::{ConditionInput, DenoiserNet};
use crate::error::{bail, Result};
use crate::outpaint::{guided_noise, sample, OutpaintOutput, OutpaintSpec, ReverseModel, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Per-frame weight of a clip's prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ClipWeights {
    #[default]
    Ones,
    /// `sin(pi * (k + 0.5) / clip_len)` at local frame `k`.
    RaisedCosine,
}

/// Denominator of the weighted merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MergeNorm {
    /// `sum_i w_i^2`: a weighted average.
    #[default]
    SumOfSquares,
    /// `sum_i (w_i^2)^2`, kept for comparison only.
    SquaredSquares,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipLayout {
    pub total: usize,
    pub clip_len: usize,
    pub stride: usize,
    pub clips: Vec<Range<usize>>,
    pub weights: ClipWeights,
}

impl ClipLayout {
    /// Clips `[0, len)`, `[stride, stride + len)`, ..., with the last one
    /// right-aligned to end at the final frame.
    pub fn split(total: usize, clip_len: usize, stride: usize) -> Result<Self> {
        if !(1 <= stride && stride <= clip_len && clip_len <= total) {
            bail!(Config, "need 1 <= stride <= clip_len <= total, got {}, {}, {}", stride, clip_len, total);
        }
        let mut clips = Vec::new();
        let mut start = 0;
        loop {
            if start + clip_len >= total {
                clips.push(total - clip_len..total);
                break;
            }
            clips.push(start..start + clip_len);
            start += stride;
        }
        Ok(Self {
            total,
            clip_len,
            stride,
            clips,
            weights: ClipWeights::Ones,
        })
    }

    /// A layout of explicitly listed clips, used to test degenerate overlaps.
    pub fn from_clips(total: usize, clips: Vec<Range<usize>>) -> Result<Self> {
        let Some(first) = clips.first() else {
            bail!(Config, "layout needs at least one clip");
        };
        let len = first.len();
        for c in &clips {
            if c.len() != len || c.end > total || c.is_empty() {
                bail!(Config, "clip {:?} invalid for {} frames of clip length {}", c, total, len);
            }
        }
        if clips.windows(2).any(|p| p[1].start < p[0].start) {
            bail!(Config, "clips must be sorted");
        }
        let layout = Self {
            total,
            clip_len: len,
            stride: clips.windows(2).map(|p| p[1].start - p[0].start).max().unwrap_or(len).max(1),
            clips,
            weights: ClipWeights::Ones,
        };
        if (0..total).any(|j| layout.covering(j).is_empty()) {
            bail!(Config, "layout leaves frames uncovered");
        }
        Ok(layout)
    }

    pub fn with_weights(mut self, weights: ClipWeights) -> Self {
        self.weights = weights;
        self
    }

    /// Indices of the clips containing frame `j`.
    pub fn covering(&self, j: usize) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.contains(&j))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weight(&self, local: usize) -> f64 {
        match self.weights {
            ClipWeights::Ones => 1.0,
            ClipWeights::RaisedCosine => libm::sin(core::f64::consts::PI * (local as f64 + 0.5) / self.clip_len as f64),
        }
    }
}

/// Merged state of frame `j` from the clips covering it.
///
/// `states[i]` is clip `i`'s prediction over its own frames.
pub fn co_denoise_merge(
    states: &BTreeMap<usize, Tensor>,
    layout: &ClipLayout,
    j: usize,
    norm: MergeNorm,
) -> Result<Vec<f32>> {
    let cover = layout.covering(j);
    if cover.is_empty() {
        bail!(Internal, "frame {} is not covered", j);
    }
    let mut parts = Vec::with_capacity(cover.len());
    for &i in &cover {
        let Some(s) = states.get(&i) else {
            bail!(Internal, "missing prediction of clip {} for frame {}", i, j);
        };
        let local = j - layout.clips[i].start;
        let (t, d, h, w) = s.dims4()?;
        if t != layout.clip_len {
            bail!(Shape, "clip {} state has {} frames, expected {}", i, t, layout.clip_len);
        }
        let n = d * h * w;
        parts.push((&s.data()[local * n..(local + 1) * n], layout.weight(local)));
    }
    if parts.len() == 1 {
        return Ok(parts[0].0.to_vec());
    }
    let n = parts[0].0.len();
    if parts.iter().any(|p| p.0.len() != n) {
        bail!(Shape, "clip states disagree in frame size");
    }
    let den: f64 = match norm {
        MergeNorm::SumOfSquares => parts.iter().map(|p| p.1 * p.1).sum(),
        MergeNorm::SquaredSquares => parts.iter().map(|p| (p.1 * p.1) * (p.1 * p.1)).sum(),
    };
    let all_ones = parts.iter().all(|p| p.1 == 1.0);
    Ok((0..n)
        .map(|e| {
            if all_ones && norm == MergeNorm::SumOfSquares {
                let s: f32 = parts.iter().map(|p| p.0[e]).sum();
                s / parts.len() as f32
            } else {
                let s: f64 = parts.iter().map(|p| p.1 * p.1 * p.0[e] as f64).sum();
                (s / den) as f32
            }
        })
        .collect())
}

/// Merges every frame into a `[total, d, h, w]` state.
pub fn merge_all(states: &BTreeMap<usize, Tensor>, layout: &ClipLayout, norm: MergeNorm) -> Result<Tensor> {
    let Some(first) = states.values().next() else {
        bail!(Internal, "no clip states");
    };
    let (_, d, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(layout.total * d * h * w);
    for j in 0..layout.total {
        data.extend(co_denoise_merge(states, layout, j, norm)?);
    }
    Tensor::new(&[layout.total, d, h, w], data)
}

/// Runs the per-clip unknown branch and merges the clip states.
pub struct CoDenoiseModel<'a> {
    pub net: &'a DenoiserNet,
    pub adapters: Option<&'a AdapterSet>,
    pub conds: Vec<ConditionInput>,
    pub insertion: Insertion,
    pub layout: &'a ClipLayout,
    pub sched: &'a NoiseSchedule,
    pub guidance_scale: f64,
    pub guidance_window: usize,
    pub norm: MergeNorm,
    passes: Cell<usize>,
}

impl<'a> CoDenoiseModel<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: &'a DenoiserNet,
        adapters: Option<&'a AdapterSet>,
        cond: &ConditionInput,
        insertion: Insertion,
        layout: &'a ClipLayout,
        sched: &'a NoiseSchedule,
        cfg: &SamplerConfig,
        norm: MergeNorm,
    ) -> Result<Self> {
        let conds = layout
            .clips
            .iter()
            .map(|c| {
                Ok(ConditionInput {
                    masked_video: cond.masked_video.slice_leading(c.start, c.end)?,
                    mask: cond.mask.slice_leading(c.start, c.end)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            adapters,
            conds,
            insertion,
            layout,
            sched,
            guidance_scale: cfg.guidance_scale,
            guidance_window: cfg.guidance_window,
            norm,
            passes: Cell::new(0),
        })
    }

    pub fn passes(&self) -> usize {
        self.passes.get()
    }
}

impl ReverseModel for CoDenoiseModel<'_> {
    fn unknown_step(&self, v_t: &Tensor, t: usize, t_prev: usize, sigma: f64, z: &Tensor, step: usize) -> Result<Tensor> {
        if v_t.shape()[0] != self.layout.total {
            bail!(Shape, "state has {} frames, layout covers {}", v_t.shape()[0], self.layout.total);
        }
        let s = if step < self.guidance_window { self.guidance_scale } else { 1.0 };
        let mut states = BTreeMap::new();
        for (i, c) in self.layout.clips.iter().enumerate() {
            let v = v_t.slice_leading(c.start, c.end)?;
            let zc = z.slice_leading(c.start, c.end)?;
            let eps = guided_noise(self.net, self.adapters, &v, &self.conds[i], t, s, &self.insertion)?;
            self.passes.set(self.passes.get() + if s == 1.0 { 1 } else { 2 });
            states.insert(i, self.sched.ddim_step(&v, &eps, t, t_prev, sigma, &zc)?);
        }
        merge_all(&states, self.layout, self.norm)
    }
}

/// Outpaints a long video with one global reverse loop over all clips.
#[allow(clippy::too_many_arguments)]
pub fn outpaint_long(
    video: &Tensor,
    spec: &OutpaintSpec,
    net: &DenoiserNet,
    adapters: Option<&AdapterSet>,
    cfg: &SamplerConfig,
    layout: &ClipLayout,
    sched: &NoiseSchedule,
    norm: MergeNorm,
) -> Result<OutpaintOutput> {
    cfg.validate()?;
    if video.dims4()?.0 != layout.total {
        bail!(Shape, "video has {} frames, layout covers {}", video.shape()[0], layout.total);
    }
    let source = spec.pad(video)?;
    let known = spec.known_map();
    let cond = ConditionInput::from_video(&source, &known)?;
    let insertion = match adapters {
        Some(_) => Insertion::SpatialAware(SaConfig::new(cfg.decay, spec.known_rect(), spec.target())?),
        None => Insertion::Full,
    };
    let model = CoDenoiseModel::new(net, adapters, &cond, insertion, layout, sched, cfg, norm)?;
    let out = sample(&model, &source, &known, sched, cfg, None)?;
    Ok(OutpaintOutput {
        video: out.video,
        reverse_steps: out.reverse_steps,
        network_passes: model.passes(),
        regrets: out.regrets,
        identity: spec.expansion.is_identity(),
        used_adapters: adapters.is_some(),
    })
}
