//! Noise schedules, forward noising and the reverse update.
//!
//! Schedule arrays are kept in `f64` and indexed by integer timestep with
//! `alpha_bar(0) == 1`, so noising to timestep zero returns the clean signal.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`, with `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`, both included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Config, "schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            bail!(Config, "need 0 < beta_start <= beta_end < 1, got {} and {}", beta_start, beta_end);
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            bail!(Config, "schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            bail!(Config, "beta {} outside (0, 1)", b);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        let posterior_betas = (1..=betas.len())
            .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `prod_{i = from+1}^{to} alpha_i`, accumulated factor by factor.
    pub fn alpha_product(&self, from: usize, to: usize) -> f64 {
        (from + 1..=to).map(|i| self.alpha(i)).product()
    }

    /// Posterior mean of `x_{t-1}` given `x_t` and the noise that produced it.
    pub fn posterior_mean(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if t == 0 {
            bail!(ScheduleBounds, "posterior mean undefined at t = 0");
        }
        let a = self.alpha(t);
        let c0 = (1.0 / libm::sqrt(a)) as f32;
        let c1 = ((1.0 - a) / (libm::sqrt(1.0 - self.alpha_bar(t)) * libm::sqrt(a))) as f32;
        x_t.zip_map(eps, |x, e| c0 * x - c1 * e)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            bail!(ScheduleBounds, "timestep {} beyond schedule length {}", t, self.steps());
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if t == 0 {
            x0.same_shape(eps)?;
            return Ok(x0.clone());
        }
        let ab = self.alpha_bar(t);
        let (cx, ce) = (libm::sqrt(ab) as f32, libm::sqrt(1.0 - ab) as f32);
        x0.zip_map(eps, |x, e| cx * x + ce * e)
    }

    /// Predicted-x0 reverse update from `t` to `t_prev`.
    ///
    /// `sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps_hat + sigma * z`
    /// with `x0_hat = (v_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
    pub fn ddim_step(
        &self,
        v_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
        sigma: f64,
        z: &Tensor,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        if t <= t_prev || t == 0 {
            bail!(Config, "reverse step needs t > t_prev, got {} -> {}", t, t_prev);
        }
        v_t.same_shape(eps_hat)?;
        v_t.same_shape(z)?;
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let direction = 1.0 - ab_prev - sigma * sigma;
        if sigma < 0.0 || direction < -1e-12 {
            bail!(Config, "sigma {} too large for step {} -> {}", sigma, t, t_prev);
        }
        let sa = libm::sqrt(ab);
        let sa_prev = libm::sqrt(ab_prev);
        let s1 = libm::sqrt(1.0 - ab);
        let sd = libm::sqrt(direction.max(0.0));
        let (sa, sa_prev, s1, sd, sg) = (sa as f32, sa_prev as f32, s1 as f32, sd as f32, sigma as f32);
        let data = v_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .zip(z.data())
            .map(|((&v, &e), &zz)| sa_prev * ((v - s1 * e) / sa) + sd * e + sg * zz)
            .collect();
        Tensor::new(v_t.shape(), data)
    }
}

/// How the per-step noise level of the reverse update is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SigmaMode {
    #[default]
    Deterministic,
    /// Ancestral noise; equals `sqrt(posterior_beta_t)` for unit strides.
    DdpmLike,
}

/// The decreasing timesteps visited at inference and their noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepPlan {
    timesteps: Vec<usize>,
    sigmas: Vec<f64>,
}

impl TimestepPlan {
    /// Evenly spaced timesteps from `T` down to 1.
    pub fn new(sched: &NoiseSchedule, n_steps: usize, mode: SigmaMode) -> Result<Self> {
        let big_t = sched.steps();
        if n_steps == 0 || n_steps > big_t {
            bail!(Config, "need 1 <= steps <= {}, got {}", big_t, n_steps);
        }
        let timesteps: Vec<usize> = if n_steps == 1 {
            alloc::vec![1]
        } else {
            let span = big_t - 1;
            let gaps = n_steps - 1;
            (0..n_steps)
                .map(|k| big_t - (2 * k * span + gaps) / (2 * gaps))
                .collect()
        };
        let sigmas = timesteps
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
                match mode {
                    SigmaMode::Deterministic => 0.0,
                    SigmaMode::DdpmLike => {
                        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
                        libm::sqrt(((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0))
                    }
                }
            })
            .collect();
        Ok(Self { timesteps, sigmas })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Timestep at plan position `k`; position `len()` is timestep zero.
    pub fn at(&self, k: usize) -> usize {
        self.timesteps.get(k).copied().unwrap_or(0)
    }
}
