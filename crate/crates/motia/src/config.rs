//! JSON run configuration.
//!
//! Every field has a default, so `{}` is a complete config; unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use motia_core::adaptation::AdaptConfig;
use motia_core::data::{CorpusConfig, ShapeKind, ShapesSceneConfig};
use motia_core::denoiser::{DenoiserConfig, PretrainConfig};
use motia_core::longvideo::{ClipLayout, ClipWeights, MergeNorm};
use motia_core::oracle::OracleCheckConfig;
use motia_core::outpaint::SamplerConfig;
use motia_core::rng::CounterRng;
use motia_core::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{self, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserSection,
    pub adapt: AdaptConfig,
    pub sampler: SamplerConfig,
    pub layout: LayoutConfig,
    pub data: DataConfig,
    pub seeds: SeedConfig,
    pub paths: PathConfig,
    pub oracle: OracleCheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub architecture: DenoiserConfig,
    pub pretrain: PretrainConfig,
}

/// Long-video clip layout; `clip_len: null` denoises the whole video as one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub clip_len: Option<usize>,
    pub stride: usize,
    pub weights: ClipWeights,
    pub norm: MergeNorm,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            clip_len: None,
            stride: 8,
            weights: ClipWeights::Ones,
            norm: MergeNorm::SumOfSquares,
        }
    }
}

impl LayoutConfig {
    /// The clip layout for a `frames`-long video, or `None` when one clip covers it.
    pub fn layout(&self, frames: usize) -> Result<Option<ClipLayout>> {
        match self.clip_len {
            Some(len) if len < frames => Ok(Some(ClipLayout::split(frames, len, self.stride)?.with_weights(self.weights))),
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    #[default]
    Mixed,
    Disc,
    Square,
}

/// Synthetic video produced by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: SceneKind,
    pub frames: usize,
    pub size: usize,
    pub shapes: usize,
    pub channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Mixed,
            frames: 16,
            size: 32,
            shapes: 2,
            channels: 1,
        }
    }
}

impl DataConfig {
    /// The scene drawn for `seed`; pinned kinds override the drawn shape kinds.
    pub fn scene(&self, seed: u64) -> Result<ShapesSceneConfig> {
        let corpus = CorpusConfig {
            frames: self.frames,
            height: self.size,
            width: self.size,
            channels: self.channels,
            min_shapes: self.shapes,
            max_shapes: self.shapes,
            ..CorpusConfig::default()
        };
        let mut scene = corpus.sample(&mut CounterRng::named(seed, "data/scene", 0))?;
        let pinned = match self.kind {
            SceneKind::Mixed => None,
            SceneKind::Disc => Some(ShapeKind::Disc),
            SceneKind::Square => Some(ShapeKind::Square),
        };
        if let Some(kind) = pinned {
            scene.shapes.iter_mut().for_each(|s| s.kind = kind);
        }
        Ok(scene)
    }
}

/// The single master seed; named sub-streams keep every consumer independent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub seed: u64,
}

/// Fallbacks for file flags that were not given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub video: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub adapters: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str::<Self>(text)?.effective())
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default().effective()),
            Some(p) => {
                let bytes = error::read(p)?;
                let text = String::from_utf8_lossy(&bytes);
                Self::from_json(&text)
            }
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds.seed = s;
        }
        self.effective()
    }

    /// Propagates the master seed into the sections that carry their own.
    pub fn effective(mut self) -> Self {
        let s = self.seeds.seed;
        self.adapt.seed = s;
        self.sampler.seed = s;
        self.oracle.seed = s;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.adapt.iterations, 1000);
        assert_eq!(c.adapt.optimizer.lr, 1e-4);
        assert_eq!((c.sampler.steps, c.sampler.jump_length, c.sampler.repeats), (25, 3, 4));
        assert_eq!(c.schedule.steps, 1000);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"stepz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"adapt": {"optimizer": {"learning_rate": 1}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"denoiser": {"pretrain": {"corpus": {"x": 1}}}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"sampler": {"repeats": 0}, "seeds": {"seed": 9}}"#).unwrap();
        assert_eq!(c.sampler.repeats, 0);
        assert_eq!(c.sampler.steps, 25);
        assert_eq!((c.sampler.seed, c.adapt.seed, c.oracle.seed), (9, 9, 9));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_json(r#"{"layout": {"clip_len": 16, "weights": "raised_cosine"}}"#).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn pinned_kinds() {
        let data = DataConfig {
            kind: SceneKind::Square,
            shapes: 3,
            ..DataConfig::default()
        };
        let s = data.scene(4).unwrap();
        assert_eq!(s.shapes.len(), 3);
        assert!(s.shapes.iter().all(|s| s.kind == ShapeKind::Square));
    }
}
