//! Low-rank adapters and their spatially weighted insertion.
//!
//! A host layer with base map `W: d_in -> d_out` becomes
//! `W^T x_p + alpha(p) * (alpha_lora / r) * (W_up W_down)^T x_p`, where
//! `alpha(p) = exp(-K * dist(p, known) / max_q dist(q, known))` decays with
//! the distance from the known rectangle. Full insertion is `alpha(p) == 1`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::DenoiserNet;
use crate::error::{bail, Result};
use crate::real::Real;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Real = f32> {
    /// `[d_in, r]`
    pub down: Tensor<T>,
    /// `[r, d_out]`
    pub up: Tensor<T>,
    pub alpha: f32,
}

impl<T: Real> LoraAdapter<T> {
    pub fn new(down: Tensor<T>, up: Tensor<T>, alpha: f32) -> Result<Self> {
        let (d_in, r) = crate::ops::dims2(&down)?;
        let (r2, d_out) = crate::ops::dims2(&up)?;
        if r != r2 {
            bail!(Shape, "adapter ranks disagree: down {:?}, up {:?}", down.shape(), up.shape());
        }
        if r > d_in.min(d_out) {
            bail!(Config, "rank {} exceeds min({}, {})", r, d_in, d_out);
        }
        Ok(Self { down, up, alpha })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[1]
    }

    /// `alpha_lora / r`.
    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank() as f64
    }

    /// Ranks above a quarter of the smaller side are allowed but not "low".
    pub fn is_comfortably_low_rank(&self) -> bool {
        4 * self.rank() <= self.d_in().min(self.d_out())
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            down: self.down.cast(),
            up: self.up.cast(),
            alpha: self.alpha,
        }
    }
}

/// Adapters keyed by host layer name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdapterSet<T: Real = f32> {
    entries: BTreeMap<String, LoraAdapter<T>>,
}

impl<T: Real> AdapterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, adapter: LoraAdapter<T>) {
        self.entries.insert(name, adapter);
    }

    pub fn get(&self, name: &str) -> Option<&LoraAdapter<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LoraAdapter<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraAdapter<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut LoraAdapter<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|a| a.down.len() + a.up.len()).sum()
    }

    /// Checks every key against the host layers of `net`.
    pub fn validate_for<U: Real>(&self, net: &DenoiserNet<U>) -> Result<()> {
        let hosts = net.adapter_hosts();
        for (name, adapter) in &self.entries {
            let Some(host) = hosts.iter().find(|h| &h.name == name) else {
                bail!(Config, "adapter {} has no host layer", name);
            };
            if (host.d_in, host.d_out) != (adapter.d_in(), adapter.d_out()) {
                bail!(
                    Shape,
                    "adapter {} is {}x{}, host is {}x{}",
                    name,
                    adapter.d_in(),
                    adapter.d_out(),
                    host.d_in,
                    host.d_out
                );
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        AdapterSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// True when every up-projection is exactly zero.
    pub fn is_identity(&self) -> bool {
        self.entries.values().all(|a| a.up.data().iter().all(|v| *v == T::zero()))
    }
}

/// One adapter per host layer of `net`: zero up-projection, Gaussian
/// down-projection with variance `1 / d_in`.
pub fn init_adapters(net: &DenoiserNet, rank: usize, alpha: f32, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        bail!(Config, "adapter rank must be at least 1");
    }
    let mut set = AdapterSet::new();
    for host in net.adapter_hosts() {
        if rank > host.d_in.min(host.d_out) {
            bail!(Config, "rank {} exceeds min(d_in, d_out) = {} of host {}", rank, host.d_in.min(host.d_out), host.name);
        }
        let mut rng = CounterRng::named(seed, "adapters/down", crate::rng::stream_id(&host.name));
        let std = 1.0 / libm::sqrt(host.d_in as f64);
        let down = Tensor::from_fn(&[host.d_in, rank], |_| (rng.normal() * std) as f32)?;
        let up = Tensor::zeros(&[rank, host.d_out])?;
        set.insert(host.name.clone(), LoraAdapter::new(down, up, alpha)?);
    }
    Ok(set)
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Result<Self> {
        if top >= bottom || left >= right {
            bail!(Config, "empty rectangle rows {}..{} cols {}..{}", top, bottom, left, right);
        }
        Ok(Self {
            top,
            bottom,
            left,
            right,
        })
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    /// Euclidean distance from pixel `(row, col)` to the nearest pixel of the rectangle.
    pub fn distance(&self, row: usize, col: usize) -> f64 {
        let cr = row.clamp(self.top, self.bottom - 1);
        let cc = col.clamp(self.left, self.right - 1);
        let dr = row as f64 - cr as f64;
        let dc = col as f64 - cc as f64;
        libm::sqrt(dr * dr + dc * dc)
    }

    /// Maps the rectangle from `from` resolution onto `to` resolution,
    /// flooring the start and ceiling the end so it never becomes empty.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> Rect {
        if from == to {
            return *self;
        }
        let floor = |v: usize, a: usize, b: usize| v * b / a;
        let ceil = |v: usize, a: usize, b: usize| (v * b).div_ceil(a);
        let top = floor(self.top, from.0, to.0).min(to.0 - 1);
        let left = floor(self.left, from.1, to.1).min(to.1 - 1);
        let bottom = ceil(self.bottom, from.0, to.0).clamp(top + 1, to.0);
        let right = ceil(self.right, from.1, to.1).clamp(left + 1, to.1);
        Rect {
            top,
            bottom,
            left,
            right,
        }
    }
}

/// Spatially aware insertion settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SaConfig {
    /// Decay constant `K >= 0`.
    pub decay: f64,
    /// Known region in frame coordinates.
    pub known: Rect,
    /// Frame `(height, width)` the rectangle refers to.
    pub frame: (usize, usize),
}

impl SaConfig {
    pub fn new(decay: f64, known: Rect, frame: (usize, usize)) -> Result<Self> {
        if !(decay >= 0.0) || !decay.is_finite() {
            bail!(Config, "decay constant must be finite and >= 0, got {}", decay);
        }
        if known.bottom > frame.0 || known.right > frame.1 || known.top >= known.bottom || known.left >= known.right {
            bail!(Config, "known rectangle {:?} not inside frame {:?}", known, frame);
        }
        Ok(Self { decay, known, frame })
    }
}

/// Insertion weight `alpha(p)` at feature position `p = (row, col)`.
pub fn sa_weight(p: (usize, usize), cfg: &SaConfig, feature: (usize, usize)) -> Result<f64> {
    if p.0 >= feature.0 || p.1 >= feature.1 {
        bail!(Input, "position {:?} outside feature map {:?}", p, feature);
    }
    let rect = cfg.known.rescale(cfg.frame, feature);
    let max = max_distance(&rect, feature);
    Ok(weight(rect.distance(p.0, p.1), max, cfg.decay))
}

fn max_distance(rect: &Rect, feature: (usize, usize)) -> f64 {
    let mut max = 0.0f64;
    for r in 0..feature.0 {
        for c in 0..feature.1 {
            max = max.max(rect.distance(r, c));
        }
    }
    max
}

#[inline]
fn weight(dist: f64, max: f64, decay: f64) -> f64 {
    if max == 0.0 {
        1.0
    } else {
        libm::exp(-decay * dist / max)
    }
}

/// Row-major `alpha(p)` over a whole feature map.
pub fn sa_weight_map(cfg: &SaConfig, feature: (usize, usize)) -> Vec<f64> {
    let rect = cfg.known.rescale(cfg.frame, feature);
    let max = max_distance(&rect, feature);
    let mut out = Vec::with_capacity(feature.0 * feature.1);
    for r in 0..feature.0 {
        for c in 0..feature.1 {
            out.push(weight(rect.distance(r, c), max, cfg.decay));
        }
    }
    out
}

/// How adapters enter the host layers during a forward pass.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Insertion {
    #[default]
    Full,
    SpatialAware(SaConfig),
}

/// `W^T x + alpha_p * (alpha_lora / r) * (W_up W_down)^T x` for one feature vector.
///
/// `base` is `[d_in, d_out]`.
pub fn adapted_transform(x: &[f32], base: &Tensor, adapter: &LoraAdapter, alpha_p: f64) -> Result<Vec<f32>> {
    let (d_in, d_out) = crate::ops::dims2(base)?;
    if x.len() != d_in || adapter.d_in() != d_in || adapter.d_out() != d_out {
        bail!(
            Shape,
            "x has {} entries, base is {}x{}, adapter is {}x{}",
            x.len(),
            d_in,
            d_out,
            adapter.d_in(),
            adapter.d_out()
        );
    }
    let r = adapter.rank();
    let mut hidden = alloc::vec![0.0f64; r];
    for (i, &xi) in x.iter().enumerate() {
        for (k, h) in hidden.iter_mut().enumerate() {
            *h += xi as f64 * adapter.down.data()[i * r + k] as f64;
        }
    }
    let s = alpha_p * adapter.scale();
    let mut out = alloc::vec![0.0f32; d_out];
    for (j, o) in out.iter_mut().enumerate() {
        let mut base_v = 0.0f64;
        for (i, &xi) in x.iter().enumerate() {
            base_v += xi as f64 * base.data()[i * d_out + j] as f64;
        }
        let mut low = 0.0f64;
        for (k, &h) in hidden.iter().enumerate() {
            low += h * adapter.up.data()[k * d_out + j] as f64;
        }
        *o = (base_v + s * low) as f32;
    }
    Ok(out)
}
