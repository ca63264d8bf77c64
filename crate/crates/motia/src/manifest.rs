//! Run manifest written next to every outpainting result.

use std::ops::Range;

use motia_core::longvideo::{ClipLayout, ClipWeights, MergeNorm};
use motia_core::outpaint::Expansion;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEcho {
    pub total: usize,
    pub clip_len: usize,
    pub stride: usize,
    pub clips: Vec<Range<usize>>,
    pub weights: ClipWeights,
    pub norm: MergeNorm,
}

impl LayoutEcho {
    pub fn new(layout: &ClipLayout, norm: MergeNorm) -> Self {
        Self {
            total: layout.total,
            clip_len: layout.clip_len,
            stride: layout.stride,
            clips: layout.clips.clone(),
            weights: layout.weights,
            norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutpaintManifest {
    pub seed: u64,
    pub source_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub expansion: Expansion,
    /// No expansion: the output is the input.
    pub identity: bool,
    /// Ran without adapters.
    pub base_only: bool,
    /// Denoiser reverse steps taken, regret repeats included.
    pub reverse_steps: usize,
    /// Network forward passes, counting both guidance branches and every clip.
    pub network_passes: usize,
    pub regrets: usize,
    /// Present when the video was co-denoised in overlapping clips.
    pub layout: Option<LayoutEcho>,
    /// Effective config with defaults filled in.
    pub config: RunConfig,
    /// The only field that varies between identical runs.
    pub wall_time_seconds: f64,
}

impl OutpaintManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
