//! The toy conditional video denoiser.
//!
//! Input is the channel concatenation `[v_noisy, masked_video, mask]`. The
//! body is an input conv, `blocks` residual blocks of
//! `conv -> group norm -> + time bias -> SiLU`, one residual width-3
//! temporal conv, and an output conv back to `channels`. The input conv,
//! block convs and the temporal conv host adapters; the output conv does not.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::adaptation::{random_boundary_mask, MarginLimits};
use crate::adapters::{sa_weight_map, AdapterSet, Insertion};
use crate::data::{gen_moving_shapes, CorpusConfig};
use crate::error::{bail, Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::rng::{CounterRng, Streams};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 16,
            blocks: 2,
            embed_dim: 16,
            channels: 1,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("blocks", self.blocks),
            ("embed_dim", self.embed_dim),
            ("channels", self.channels),
            ("groups", self.groups),
        ] {
            if v == 0 {
                bail!(Config, "denoiser {} must be at least 1", name);
            }
        }
        crate::ops::check_groups(self.width, self.groups)
    }

    /// Input channels of the first conv: noisy video, masked video, mask.
    pub fn input_channels(&self) -> usize {
        2 * self.channels + 1
    }
}

/// Whether a parameter is frozen base weight or a layer that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Base,
    AdapterHost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HostKind {
    /// `[c_out, c_in, 1, 3, 3]` kernel viewed as a `(c_in * 9) -> c_out` map.
    Spatial,
    /// `[c_out, c_in, 3]` kernel viewed as a `(c_in * 3) -> c_out` map.
    Temporal,
}

/// A layer that may carry an adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostLayer {
    pub name: String,
    /// Name of the kernel parameter.
    pub param: String,
    pub d_in: usize,
    pub d_out: usize,
    pub kind: HostKind,
}

/// Mask-conditioning input. `masked_video` is `-1` exactly where `mask` is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput<T: Real = f32> {
    /// `[t, d, h, w]`
    pub masked_video: Tensor<T>,
    /// `[t, 1, h, w]`, 1 = known.
    pub mask: Tensor<T>,
}

impl<T: Real> ConditionInput<T> {
    /// Builds the condition from a video and a per-pixel `known` map of
    /// length `h * w`, shared by every frame.
    pub fn from_video(video: &Tensor<T>, known: &[bool]) -> Result<Self> {
        let (t, d, h, w) = video.dims4()?;
        if known.len() != h * w {
            bail!(Shape, "known map has {} entries for {}x{} frames", known.len(), h, w);
        }
        let hw = h * w;
        let masked = Tensor::from_fn(video.shape(), |i| {
            if known[i % hw] {
                video.data()[i]
            } else {
                -T::one()
            }
        })?;
        let mask = Tensor::from_fn(&[t, 1, h, w], |i| if known[i % hw] { T::one() } else { T::zero() })?;
        let _ = d;
        let cond = Self {
            masked_video: masked,
            mask,
        };
        cond.validate()?;
        Ok(cond)
    }

    /// The condition with nothing known.
    pub fn unconditional(shape: &[usize]) -> Result<Self> {
        let (t, _, h, w) = dims4_of(shape)?;
        Ok(Self {
            masked_video: Tensor::full(shape, -T::one())?,
            mask: Tensor::zeros(&[t, 1, h, w])?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d, h, w) = self.masked_video.dims4()?;
        if self.mask.shape() != [t, 1, h, w] {
            bail!(Shape, "mask shape {:?} for masked video {:?}", self.mask.shape(), self.masked_video.shape());
        }
        let hw = h * w;
        for f in 0..t {
            for p in 0..hw {
                let m = self.mask.data()[f * hw + p];
                let known = if m == T::one() {
                    true
                } else if m == T::zero() {
                    false
                } else {
                    bail!(Input, "mask value {:?} is not binary", m);
                };
                for c in 0..d {
                    let v = self.masked_video.data()[(f * d + c) * hw + p];
                    if known && !(v >= T::zero() && v <= T::one()) {
                        bail!(Input, "known pixel value {:?} outside [0, 1]", v);
                    }
                    if !known && v != -T::one() {
                        bail!(Input, "masked pixel holds {:?} instead of -1", v);
                    }
                }
            }
        }
        Ok(())
    }

    /// Known pixels with zeros elsewhere, plus the per-pixel known map.
    pub fn recover(&self) -> (Tensor<T>, Vec<bool>) {
        let (t, d, h, w) = self.masked_video.dims4().expect("validated");
        let hw = h * w;
        let known: Vec<bool> = self.mask.data()[..hw].iter().map(|&m| m == T::one()).collect();
        let _ = (t, d);
        let values = self.masked_video.map(|v| if v == -T::one() { T::zero() } else { v });
        (values, known)
    }

    pub fn cast<U: Real>(&self) -> ConditionInput<U> {
        ConditionInput {
            masked_video: self.masked_video.cast(),
            mask: self.mask.cast(),
        }
    }
}

fn dims4_of(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [t, d, h, w] => Ok((*t, *d, *h, *w)),
        _ => bail!(Shape, "expected a [t, d, h, w] shape, got {:?}", shape),
    }
}

/// Sinusoidal features of an integer timestep.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = libm::exp(-libm::log(10_000.0) * 2.0 * i / dim as f64);
            let arg = t as f64 * freq;
            if j % 2 == 0 {
                libm::sin(arg)
            } else {
                libm::cos(arg)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    conv_w: usize,
    conv_b: usize,
    gain: usize,
    shift: usize,
    temb_w: usize,
    temb_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    time_w: usize,
    time_b: usize,
    in_w: usize,
    in_b: usize,
    blocks: Vec<BlockIdx>,
    temporal_w: usize,
    temporal_b: usize,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(blocks: usize) -> Self {
        let block = |i: usize| {
            let b = 4 + 6 * i;
            BlockIdx {
                conv_w: b,
                conv_b: b + 1,
                gain: b + 2,
                shift: b + 3,
                temb_w: b + 4,
                temb_b: b + 5,
            }
        };
        let tail = 4 + 6 * blocks;
        Self {
            time_w: 0,
            time_b: 1,
            in_w: 2,
            in_b: 3,
            blocks: (0..blocks).map(block).collect(),
            temporal_w: tail,
            temporal_b: tail + 1,
            out_w: tail + 2,
            out_b: tail + 3,
        }
    }
}

/// Parameter names and shapes in storage order.
fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let (w, e, d) = (cfg.width, cfg.embed_dim, cfg.channels);
    let mut specs = vec![
        (String::from("time.w"), vec![e, e]),
        (String::from("time.b"), vec![1, e]),
        (String::from("in.w"), vec![w, cfg.input_channels(), 1, 3, 3]),
        (String::from("in.b"), vec![w]),
    ];
    for i in 0..cfg.blocks {
        specs.push((format!("block{}.conv.w", i), vec![w, w, 1, 3, 3]));
        specs.push((format!("block{}.conv.b", i), vec![w]));
        specs.push((format!("block{}.norm.gain", i), vec![w]));
        specs.push((format!("block{}.norm.shift", i), vec![w]));
        specs.push((format!("block{}.temb.w", i), vec![e, w]));
        specs.push((format!("block{}.temb.b", i), vec![1, w]));
    }
    specs.push((String::from("temporal.w"), vec![w, w, 3]));
    specs.push((String::from("temporal.b"), vec![w]));
    specs.push((String::from("out.w"), vec![d, w, 1, 3, 3]));
    specs.push((String::from("out.b"), vec![d]));
    specs
}

/// Adapter bindings on a tape: `(down, up, alpha_lora / r)` per host.
pub type BoundAdapters = BTreeMap<String, (Var, Var, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet<T: Real = f32> {
    config: DenoiserConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl DenoiserNet<f32> {
    /// Fan-in uniform weights, zero biases, unit norm gains.
    pub fn build(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let tensor = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)?
            } else if name.ends_with(".b") || name.ends_with(".shift") {
                Tensor::zeros(&shape)?
            } else {
                let fan_in = if shape.len() == 2 { shape[0] } else { n / shape[0] };
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                let mut rng = CounterRng::named(seed, "denoiser/init", crate::rng::stream_id(&name));
                Tensor::uniform_from(&shape, -bound, bound, &mut rng)?
            };
            names.push(name);
            params.push(tensor);
        }
        Ok(Self { config, names, params })
    }
}

impl<T: Real> DenoiserNet<T> {
    /// Assembles a net from named tensors, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut by_name: BTreeMap<String, Tensor<T>> = named.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let Some(t) = by_name.remove(&name) else {
                bail!(Input, "missing parameter {}", name);
            };
            if t.shape() != shape.as_slice() {
                bail!(Shape, "parameter {} has shape {:?}, expected {:?}", name, t.shape(), shape);
            }
            names.push(name);
            params.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            bail!(Input, "unexpected parameter {}", extra);
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn role(&self, name: &str) -> ParamRole {
        if self.adapter_hosts().iter().any(|h| h.param == name) {
            ParamRole::AdapterHost
        } else {
            ParamRole::Base
        }
    }

    pub fn adapter_hosts(&self) -> Vec<HostLayer> {
        let c = &self.config;
        let mut hosts = vec![HostLayer {
            name: String::from("in"),
            param: String::from("in.w"),
            d_in: c.input_channels() * 9,
            d_out: c.width,
            kind: HostKind::Spatial,
        }];
        for i in 0..c.blocks {
            hosts.push(HostLayer {
                name: format!("block{}.conv", i),
                param: format!("block{}.conv.w", i),
                d_in: c.width * 9,
                d_out: c.width,
                kind: HostKind::Spatial,
            });
        }
        hosts.push(HostLayer {
            name: String::from("temporal"),
            param: String::from("temporal.w"),
            d_in: c.width * 3,
            d_out: c.width,
            kind: HostKind::Temporal,
        });
        hosts
    }

    pub fn cast<U: Real>(&self) -> DenoiserNet<U> {
        DenoiserNet {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.leaf(p.clone()) })
            .collect()
    }

    /// Records one forward pass on `tape` and returns the noise prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        adapters: Option<&BoundAdapters>,
        insertion: &Insertion,
        v_noisy: &Tensor<T>,
        cond: &ConditionInput<T>,
        t: usize,
    ) -> Result<Var> {
        let c = &self.config;
        if params.len() != self.params.len() {
            bail!(Contract, "{} bound parameters for a net with {}", params.len(), self.params.len());
        }
        if t == 0 {
            bail!(Input, "timestep must be at least 1");
        }
        let (_, d, h, w) = v_noisy.dims4()?;
        if d != c.channels {
            bail!(Shape, "net has {} channels, input has {}", c.channels, d);
        }
        if cond.masked_video.shape() != v_noisy.shape() {
            bail!(Shape, "condition {:?} for input {:?}", cond.masked_video.shape(), v_noisy.shape());
        }
        cond.validate()?;

        let spatial: Option<Vec<f64>> = match insertion {
            Insertion::Full => None,
            Insertion::SpatialAware(sa) => Some(sa_weight_map(sa, (h, w))),
        };
        let mut host = HostCtx {
            adapters,
            spatial: spatial.as_deref(),
        };

        let lay = Layout::new(c.blocks);
        let feat = Tensor::new(
            &[1, c.embed_dim],
            timestep_features(t, c.embed_dim).into_iter().map(T::from_f64).collect(),
        )?;
        let feat = tape.leaf(feat);
        let emb = tape.matmul(feat, params[lay.time_w])?;
        let emb = tape.add(emb, params[lay.time_b])?;
        let emb = tape.silu(emb);

        let x = tape.leaf(v_noisy.clone());
        let mv = tape.leaf(cond.masked_video.clone());
        let mk = tape.leaf(cond.mask.clone());
        let input = tape.concat_channels(&[x, mv, mk])?;

        let mut hidden = host.spatial_conv(tape, "in", input, params[lay.in_w], params[lay.in_b])?;
        for (i, b) in lay.blocks.iter().enumerate() {
            let name = format!("block{}.conv", i);
            let y = host.spatial_conv(tape, &name, hidden, params[b.conv_w], params[b.conv_b])?;
            let y = tape.group_norm_3d(y, params[b.gain], params[b.shift], c.groups, GN_EPS)?;
            let tb = tape.matmul(emb, params[b.temb_w])?;
            let tb = tape.add(tb, params[b.temb_b])?;
            let tb = tape.reshape(tb, &[c.width])?;
            let y = tape.channel_bias(y, tb)?;
            let y = tape.silu(y);
            hidden = tape.add(hidden, y)?;
        }
        let y = host.temporal_conv(tape, hidden, params[lay.temporal_w], params[lay.temporal_b])?;
        hidden = tape.add(hidden, y)?;
        tape.conv_p3d(hidden, params[lay.out_w], Some(params[lay.out_b]))
    }

    /// Noise prediction on a throwaway tape.
    pub fn predict_noise(
        &self,
        adapters: Option<&AdapterSet<T>>,
        v_noisy: &Tensor<T>,
        cond: &ConditionInput<T>,
        t: usize,
        insertion: &Insertion,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let bound = match adapters {
            Some(set) => {
                set.validate_for(self)?;
                Some(bind_adapters(&mut tape, set, false))
            }
            None => None,
        };
        let out = self.forward(&mut tape, &params, bound.as_ref(), insertion, v_noisy, cond, t)?;
        let value = tape.value(out).clone();
        if !value.all_finite() {
            bail!(Numeric, "non-finite noise prediction at t={}", t);
        }
        Ok(value)
    }
}

/// Places adapter matrices on `tape`.
pub fn bind_adapters<T: Real>(tape: &mut Tape<T>, set: &AdapterSet<T>, trainable: bool) -> BoundAdapters {
    set.iter()
        .map(|(name, a)| {
            let (down, up) = if trainable {
                (tape.param(a.down.clone()), tape.param(a.up.clone()))
            } else {
                (tape.leaf(a.down.clone()), tape.leaf(a.up.clone()))
            };
            (name.clone(), (down, up, a.scale()))
        })
        .collect()
}

struct HostCtx<'a> {
    adapters: Option<&'a BoundAdapters>,
    spatial: Option<&'a [f64]>,
}

impl HostCtx<'_> {
    /// `(W_down W_up)^T` reshaped to the kernel layout.
    fn delta<T: Real>(&self, tape: &mut Tape<T>, name: &str, kernel_shape: &[usize]) -> Result<Option<(Var, f64)>> {
        let Some(&(down, up, scale)) = self.adapters.and_then(|a| a.get(name)) else {
            return Ok(None);
        };
        let prod = tape.matmul(down, up)?;
        let prod = tape.transpose(prod)?;
        Ok(Some((tape.reshape(prod, kernel_shape)?, scale)))
    }

    fn weigh<T: Real>(&self, tape: &mut Tape<T>, branch: Var, scale: f64) -> Result<Var> {
        match self.spatial {
            None => Ok(tape.scale(branch, T::from_f64(scale))),
            Some(map) => tape.spatial_scale(branch, map.iter().map(|&a| T::from_f64(a * scale)).collect()),
        }
    }

    fn spatial_conv<T: Real>(&mut self, tape: &mut Tape<T>, name: &str, x: Var, w: Var, b: Var) -> Result<Var> {
        let base = tape.conv_p3d(x, w, Some(b))?;
        let shape = tape.value(w).shape().to_vec();
        match self.delta(tape, name, &shape)? {
            None => Ok(base),
            Some((dk, scale)) => {
                let branch = tape.conv_p3d(x, dk, None)?;
                let branch = self.weigh(tape, branch, scale)?;
                tape.add(base, branch)
            }
        }
    }

    fn temporal_conv<T: Real>(&mut self, tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let base = tape.temporal_conv(x, w, Some(b))?;
        let shape = tape.value(w).shape().to_vec();
        match self.delta(tape, "temporal", &shape)? {
            None => Ok(base),
            Some((dk, scale)) => {
                let branch = tape.temporal_conv(x, dk, None)?;
                let branch = self.weigh(tape, branch, scale)?;
                tape.add(base, branch)
            }
        }
    }
}

/// Mean squared error between a prediction on the tape and a target.
///
/// With `unknown_only`, only pixels where `known` is false contribute.
pub fn noise_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, known: Option<&[bool]>) -> Result<Var> {
    let target = tape.leaf(target.clone());
    let diff = tape.sub(pred, target)?;
    match known {
        None => {
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
        Some(known) => {
            let (t, d, _, _) = tape.value(diff).dims4()?;
            let unknown = known.iter().filter(|k| !**k).count();
            if unknown == 0 {
                bail!(Input, "masked-only loss with nothing masked");
            }
            let map: Vec<T> = known.iter().map(|&k| if k { T::zero() } else { T::one() }).collect();
            let diff = tape.spatial_scale(diff, map)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq);
            Ok(tape.scale(total, T::from_f64(1.0 / (unknown * t * d) as f64)))
        }
    }
}

/// Base-model pretraining settings.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub steps: usize,
    pub optimizer: AdamConfig,
    /// Probability of training a step on the unconditional input.
    pub cond_dropout: f64,
    pub margin_limit: f64,
    pub corpus: CorpusConfig,
    /// Steps per logged running-average loss.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            optimizer: AdamConfig {
                lr: 2e-3,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            cond_dropout: 0.1,
            margin_limit: 0.45,
            corpus: CorpusConfig::default(),
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Loss of every step.
    pub losses: Vec<f32>,
    /// Mean loss of each consecutive `log_every` window.
    pub window_means: Vec<f32>,
}

/// Trains every parameter of `net` on freshly sampled synthetic clips with
/// random boundary masks.
pub fn pretrain_base(
    net: &mut DenoiserNet,
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
    mut on_window: impl FnMut(usize, f32),
) -> Result<PretrainReport> {
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        bail!(Config, "condition dropout {} outside [0, 1]", cfg.cond_dropout);
    }
    if cfg.log_every == 0 {
        bail!(Config, "log_every must be at least 1");
    }
    let limits = MarginLimits::uniform(cfg.margin_limit)?;
    let lengths: Vec<usize> = net.params.iter().map(Tensor::len).collect();
    let mut adam = AdamState::new(cfg.optimizer.clone(), &lengths);
    let streams = Streams::new(seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut window_means = Vec::new();
    for step in 0..cfg.steps {
        let s = step as u64;
        let scene = cfg.corpus.sample(&mut streams.at("pretrain/scene", s))?;
        let (video, _) = gen_moving_shapes(&scene)?;
        let video = video.into_tensor();
        let (_, _, h, w) = video.dims4()?;
        let mut draw = streams.at("pretrain/draws", s);
        let mask = random_boundary_mask(h, w, &limits, &mut draw)?;
        let t = draw.range_inclusive(1, sched.steps());
        let drop = draw.uniform() < cfg.cond_dropout;
        let mut eps_rng = streams.at("pretrain/eps", s);
        let eps = Tensor::randn_from(video.shape(), &mut eps_rng)?;
        let noisy = sched.forward_noise(&video, t, &eps)?;
        let cond = if drop {
            ConditionInput::unconditional(video.shape())?
        } else {
            ConditionInput::from_video(&video, &mask.known_map())?
        };

        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let pred = net.forward(&mut tape, &vars, None, &Insertion::Full, &noisy, &cond, t)?;
        let loss = noise_loss(&mut tape, pred, &eps, None)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            bail!(Numeric, "pretraining diverged at step {} (loss {})", step, value);
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(&net.params)
            .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut param_refs: Vec<&mut [f32]> = net.params.iter_mut().map(Tensor::data_mut).collect();
        adam.step(&mut param_refs, &grad_refs).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("pretraining step {}: {}", step, m)),
            other => other,
        })?;
        losses.push(value);
        if (step + 1) % cfg.log_every == 0 {
            let window = &losses[step + 1 - cfg.log_every..];
            let mean = window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64;
            window_means.push(mean as f32);
            on_window(step + 1, mean as f32);
        }
    }
    Ok(PretrainReport { losses, window_means })
}
