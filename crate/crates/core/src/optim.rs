//! Adam with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment estimates for a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, lengths: &[usize]) -> Self {
        Self {
            config,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every buffer. Rejects the whole update, leaving both
    /// parameters and state untouched, if any gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            bail!(Shape, "adam tracks {} buffers, got {} params / {} grads", self.first.len(), params.len(), grads.len());
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                bail!(Shape, "buffer {} length mismatch", i);
            }
            if g.iter().any(|v| !v.is_finite()) {
                bail!(Numeric, "non-finite gradient in buffer {}", i);
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1 as f64, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2 as f64, t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let mut pj = p[j] as f64;
                pj -= (c.lr * c.weight_decay) as f64 * pj;
                pj -= c.lr as f64 * m_hat / (libm::sqrt(v_hat) + c.eps as f64);
                p[j] = pj as f32;
            }
        }
        Ok(())
    }
}
