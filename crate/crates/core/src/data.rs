//! Synthetic moving-shapes videos.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// A `[t, d, h, w]` tensor with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video(Tensor);

impl Video {
    pub fn new(tensor: Tensor) -> Result<Self> {
        tensor.dims4()?;
        if let Some(v) = tensor.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            bail!(Input, "video value {} outside [0, 1]", v);
        }
        Ok(Self(tensor))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Frames `start..end`.
    pub fn clip(&self, start: usize, end: usize) -> Result<Video> {
        Ok(Video(self.0.slice_leading(start, end)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ShapeKind {
    Disc,
    Square,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Position at frame 0, `(row, col)`.
    pub origin: (i64, i64),
    /// Pixels per frame, `(rows, cols)`.
    pub velocity: (i64, i64),
    /// Disc radius, or half the side of a square minus one half: a square
    /// of size `s` covers `2 s + 1` pixels per side.
    pub size: usize,
    /// One value per channel.
    pub color: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShapesSceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background: Vec<f32>,
    /// Painted in order; later shapes cover earlier ones.
    pub shapes: Vec<ShapeSpec>,
}

impl ShapesSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            bail!(Config, "scene extents must be at least 1");
        }
        let in_range = |c: &[f32]| c.len() == self.channels && c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.background) {
            bail!(Config, "background needs {} values in [0, 1]", self.channels);
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !in_range(&s.color) {
                bail!(Config, "shape {} needs {} colour values in [0, 1]", i, self.channels);
            }
        }
        Ok(())
    }
}

/// Per-frame shape positions of a rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMetadata {
    /// `positions[frame][shape]`, wrapped into the frame.
    pub positions: Vec<Vec<(usize, usize)>>,
}

fn wrap(v: i64, n: usize) -> usize {
    v.rem_euclid(n as i64) as usize
}

/// Signed toroidal offset of `a` from `b` in `(-n/2, n/2]`.
fn torus_offset(a: usize, b: usize, n: usize) -> i64 {
    let n = n as i64;
    let mut d = (a as i64 - b as i64).rem_euclid(n);
    if d > n / 2 {
        d -= n;
    }
    d
}

/// Whether pixel `(r, c)` is covered by a shape centred at `centre`.
pub fn covers(kind: ShapeKind, size: usize, centre: (usize, usize), p: (usize, usize), dims: (usize, usize)) -> bool {
    let dr = torus_offset(p.0, centre.0, dims.0);
    let dc = torus_offset(p.1, centre.1, dims.1);
    let s = size as i64;
    match kind {
        ShapeKind::Disc => dr * dr + dc * dc <= s * s,
        ShapeKind::Square => dr.abs() <= s && dc.abs() <= s,
    }
}

/// Renders the scene with hard edges and toroidal wrap.
pub fn gen_moving_shapes(cfg: &ShapesSceneConfig) -> Result<(Video, SceneMetadata)> {
    cfg.validate()?;
    let (t, d, h, w) = (cfg.frames, cfg.channels, cfg.height, cfg.width);
    let mut data = vec![0.0f32; t * d * h * w];
    let mut positions = Vec::with_capacity(t);
    for f in 0..t {
        let centres: Vec<(usize, usize)> = cfg
            .shapes
            .iter()
            .map(|s| {
                (
                    wrap(s.origin.0 + s.velocity.0 * f as i64, h),
                    wrap(s.origin.1 + s.velocity.1 * f as i64, w),
                )
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let mut colour = cfg.background.as_slice();
                for (s, &centre) in cfg.shapes.iter().zip(&centres) {
                    if covers(s.kind, s.size, centre, (r, c), (h, w)) {
                        colour = &s.color;
                    }
                }
                for (ch, &v) in colour.iter().enumerate() {
                    data[((f * d + ch) * h + r) * w + c] = v;
                }
            }
        }
        positions.push(centres);
    }
    let video = Video::new(Tensor::new(&[t, d, h, w], data)?)?;
    Ok((video, SceneMetadata { positions }))
}

/// Distribution of random scenes used for pretraining.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CorpusConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub max_speed: i64,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            min_shapes: 1,
            max_shapes: 3,
            max_speed: 2,
            min_size: 2,
            max_size: 6,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            bail!(Config, "corpus extents must be at least 1");
        }
        if self.min_shapes > self.max_shapes || self.min_size > self.max_size || self.max_speed < 0 {
            bail!(Config, "corpus ranges are inverted");
        }
        Ok(())
    }

    /// Draws one scene.
    pub fn sample(&self, rng: &mut CounterRng) -> Result<ShapesSceneConfig> {
        self.validate()?;
        let d = self.channels;
        let background: Vec<f32> = (0..d).map(|_| (0.1 + 0.4 * rng.uniform()) as f32).collect();
        let n = rng.range_inclusive(self.min_shapes, self.max_shapes);
        let speed = self.max_speed as usize;
        let shapes = (0..n)
            .map(|_| ShapeSpec {
                kind: if rng.below(2) == 0 { ShapeKind::Disc } else { ShapeKind::Square },
                origin: (rng.below(self.height as u64) as i64, rng.below(self.width as u64) as i64),
                velocity: (
                    rng.range_inclusive(0, 2 * speed) as i64 - self.max_speed,
                    rng.range_inclusive(0, 2 * speed) as i64 - self.max_speed,
                ),
                size: rng.range_inclusive(self.min_size, self.max_size),
                color: (0..d).map(|_| (0.55 + 0.45 * rng.uniform()) as f32).collect(),
            })
            .collect();
        Ok(ShapesSceneConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: d,
            background,
            shapes,
        })
    }
}
