//! Closed-form Gaussian worlds for certifying the sampler.
//!
//! For `x0 ~ N(mu, S)` the minimum-MSE noise prediction and the masked
//! conditional are both linear algebra, so the sampler's output distribution
//! can be compared with the exact posterior.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{bail, Result};
use crate::outpaint::{sample, NoisePredictor, PredictorModel, SamplerConfig};
use crate::rng::CounterRng;
use crate::schedule::{NoiseSchedule, SigmaMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GaussianWorld {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianWorld {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || cov.len() != n * n {
            bail!(Shape, "{} means need a {}x{} covariance, got {} entries", n, n, n, cov.len());
        }
        let cov = DMatrix::from_row_slice(n, n, &cov);
        for i in 0..n {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 {
                    bail!(Input, "covariance is not symmetric at ({}, {})", i, j);
                }
            }
        }
        let Some(chol) = Cholesky::new(cov.clone()) else {
            bail!(Numeric, "covariance is not positive definite");
        };
        if (0..n).any(|i| !(chol.l_dirty()[(i, i)] > 0.0)) {
            bail!(Numeric, "non-positive Cholesky pivot");
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol,
        })
    }

    /// Row-major `h x w` grid with `cov_ij = rho^(|dr| + |dc|)`.
    pub fn rho_grid(h: usize, w: usize, rho: f64, mean: f64) -> Result<Self> {
        let n = h * w;
        let mut cov = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let d = (i / w).abs_diff(j / w) + (i % w).abs_diff(j % w);
                cov.push(libm::pow(rho, d as f64));
            }
        }
        Self::new(alloc::vec![mean; n], cov)
    }

    /// `A A^T + 0.1 I` with standard normal `A` scaled by `1 / sqrt(n)`.
    pub fn random(n: usize, seed: u64) -> Result<Self> {
        let mut rng = CounterRng::named(seed, "oracle/world", 0);
        let a = DMatrix::from_fn(n, n, |_, _| rng.normal() / libm::sqrt(n as f64));
        let cov = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let mean = (0..n).map(|_| rng.normal() * 0.5).collect();
        let mut flat = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                flat.push(0.5 * (cov[(i, j)] + cov[(j, i)]));
            }
        }
        Self::new(mean, flat)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.cov[(i, j)]
    }

    pub fn draw(&self, rng: &mut CounterRng) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.normal());
        (&self.mean + self.chol.l() * z).as_slice().to_vec()
    }

    /// `E[x0 | x_t]` under noise level `alpha_bar`.
    pub fn posterior_mean(&self, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        let n = self.dim();
        if x_t.len() != n {
            bail!(Shape, "state of length {} for a {}-dim world", x_t.len(), n);
        }
        let sa = libm::sqrt(alpha_bar);
        let system = &self.cov * alpha_bar + DMatrix::identity(n, n) * (1.0 - alpha_bar);
        let Some(lu) = Cholesky::new(system) else {
            bail!(Numeric, "singular noisy covariance at alpha_bar {}", alpha_bar);
        };
        let r = DVector::from_fn(n, |i, _| x_t[i] - sa * self.mean[i]);
        let corr = &self.cov * lu.solve(&r) * sa;
        Ok((&self.mean + corr).as_slice().to_vec())
    }

    /// Minimum-MSE noise prediction.
    pub fn optimal_eps(&self, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        if !(alpha_bar < 1.0) {
            bail!(Input, "noise prediction undefined at alpha_bar {}", alpha_bar);
        }
        let m = self.posterior_mean(x_t, alpha_bar)?;
        let (sa, s1) = (libm::sqrt(alpha_bar), libm::sqrt(1.0 - alpha_bar));
        Ok(x_t.iter().zip(&m).map(|(x, m)| (x - sa * m) / s1).collect())
    }

    /// Exact probability-flow map of a state at `alpha_from` to noise level `alpha_to`.
    pub fn flow_map(&self, x: &[f64], alpha_from: f64, alpha_to: f64) -> Result<Vec<f64>> {
        let n = self.dim();
        if x.len() != n {
            bail!(Shape, "state of length {} for a {}-dim world", x.len(), n);
        }
        let eig = self.cov.clone().symmetric_eigen();
        let scale = |ab: f64, lam: f64| libm::sqrt(ab * lam + 1.0 - ab);
        let (sf, st) = (libm::sqrt(alpha_from), libm::sqrt(alpha_to));
        let r = DVector::from_fn(n, |i, _| x[i] - sf * self.mean[i]);
        let mut coords = eig.eigenvectors.transpose() * r;
        for (i, c) in coords.iter_mut().enumerate() {
            let lam = eig.eigenvalues[i];
            *c *= scale(alpha_to, lam) / scale(alpha_from, lam);
        }
        let back = &eig.eigenvectors * coords;
        Ok((0..n).map(|i| back[i] + st * self.mean[i]).collect())
    }
}

/// Posterior over the unknown coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    pub unknown: Vec<usize>,
    pub mean: Vec<f64>,
    /// Row-major over `unknown`.
    pub cov: Vec<f64>,
}

/// `mu_u + S_uk S_kk^-1 (x_k - mu_k)` and `S_uu - S_uk S_kk^-1 S_ku`.
pub fn analytic_conditional(world: &GaussianWorld, known: &[bool], values: &[f64]) -> Result<Conditional> {
    let n = world.dim();
    if known.len() != n || values.len() != n {
        bail!(Shape, "mask and values must have {} entries", n);
    }
    let k: Vec<usize> = (0..n).filter(|&i| known[i]).collect();
    let u: Vec<usize> = (0..n).filter(|&i| !known[i]).collect();
    if k.is_empty() || u.is_empty() {
        bail!(Input, "conditioning needs both known and unknown coordinates");
    }
    let s = &world.cov;
    let skk = DMatrix::from_fn(k.len(), k.len(), |a, b| s[(k[a], k[b])]);
    let suk = DMatrix::from_fn(u.len(), k.len(), |a, b| s[(u[a], k[b])]);
    let suu = DMatrix::from_fn(u.len(), u.len(), |a, b| s[(u[a], u[b])]);
    let Some(ch) = Cholesky::new(skk) else {
        bail!(Numeric, "known-block covariance is singular");
    };
    let dk = DVector::from_fn(k.len(), |a, _| values[k[a]] - world.mean[k[a]]);
    let mean_u = DVector::from_fn(u.len(), |a, _| world.mean[u[a]]) + &suk * ch.solve(&dk);
    let cov_u = suu - &suk * ch.solve(&suk.transpose());
    let mut cov = Vec::with_capacity(u.len() * u.len());
    for a in 0..u.len() {
        for b in 0..u.len() {
            cov.push(cov_u[(a, b)]);
        }
    }
    Ok(Conditional {
        unknown: u,
        mean: mean_u.as_slice().to_vec(),
        cov,
    })
}

/// The optimal predictor on tensors shaped like the world's canvas.
pub struct GaussianPredictor<'a> {
    pub world: &'a GaussianWorld,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for GaussianPredictor<'_> {
    fn predict(&self, v_t: &Tensor, t: usize, _step: usize) -> Result<Tensor> {
        let x: Vec<f64> = v_t.data().iter().map(|&v| v as f64).collect();
        let eps = self.world.optimal_eps(&x, self.sched.alpha_bar(t))?;
        Tensor::new(v_t.shape(), eps.into_iter().map(|v| v as f32).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OracleCheckConfig {
    pub samples: usize,
    pub steps: usize,
    pub rho: f64,
    pub jump_length: usize,
    pub repeats: usize,
    pub mean_tolerance: f64,
    pub cov_tolerance: f64,
    /// Allowed increase of the mean error when regret is on.
    pub regret_margin: f64,
    pub seed: u64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            steps: 50,
            rho: 0.8,
            jump_length: 3,
            repeats: 4,
            mean_tolerance: 0.05,
            cov_tolerance: 0.1,
            regret_margin: 0.02,
            seed: 0,
        }
    }
}

/// Sup-norm errors of the empirical unknown-region moments.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MomentErrors {
    pub mean_error: f64,
    pub cov_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleReport {
    pub samples: usize,
    pub steps: usize,
    pub stochastic: MomentErrors,
    pub deterministic: MomentErrors,
    pub regret: MomentErrors,
    pub mean_tolerance: f64,
    pub cov_tolerance: f64,
    pub regret_margin: f64,
    pub stochastic_pass: bool,
    pub regret_pass: bool,
    pub pass: bool,
    pub warnings: Vec<String>,
}

/// Empirical moments of sampler runs against the analytic conditional.
pub fn moment_errors(
    world: &GaussianWorld,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    shape: &[usize],
    known: &[bool],
    values: &[f64],
    samples: usize,
) -> Result<MomentErrors> {
    let n = world.dim();
    if shape.iter().product::<usize>() != n {
        bail!(Shape, "canvas {:?} does not hold a {}-dim world", shape, n);
    }
    let (_, _, h, w) = crate::tensor::Tensor::<f32>::zeros(shape)?.dims4()?;
    let hw = h * w;
    let per_coord: Vec<bool> = (0..n).map(|i| known[i % hw]).collect();
    let truth = analytic_conditional(world, &per_coord, values)?;
    let source = Tensor::new(
        shape,
        (0..n).map(|i| if per_coord[i] { values[i] as f32 } else { 0.0 }).collect(),
    )?;
    let u = &truth.unknown;
    let mut sum = alloc::vec![0.0f64; u.len()];
    let mut outer = alloc::vec![0.0f64; u.len() * u.len()];
    for s in 0..samples {
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(s as u64),
            ..sampler.clone()
        };
        let model = PredictorModel::new(GaussianPredictor { world, sched }, sched);
        let out = sample(&model, &source, known, sched, &cfg, None)?;
        let x: Vec<f64> = u.iter().map(|&i| out.raw.data()[i] as f64).collect();
        for a in 0..u.len() {
            sum[a] += x[a];
            for b in 0..u.len() {
                outer[a * u.len() + b] += x[a] * x[b];
            }
        }
    }
    let ns = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / ns).collect();
    let mut mean_error = 0.0f64;
    let mut cov_error = 0.0f64;
    for a in 0..u.len() {
        mean_error = mean_error.max((mean[a] - truth.mean[a]).abs());
        for b in 0..u.len() {
            let c = outer[a * u.len() + b] / ns - mean[a] * mean[b];
            cov_error = cov_error.max((c - truth.cov[a * u.len() + b]).abs());
        }
    }
    Ok(MomentErrors { mean_error, cov_error })
}

/// The reference check: a `2 x 2` rho-grid world with the left column known.
pub fn sampler_posterior_check(sched: &NoiseSchedule, cfg: &OracleCheckConfig) -> Result<OracleReport> {
    if cfg.samples == 0 {
        bail!(Config, "oracle check needs at least one sample");
    }
    let world = GaussianWorld::rho_grid(2, 2, cfg.rho, 0.0)?;
    let shape = [1, 1, 2, 2];
    let known = [true, false, true, false];
    let values = world.draw(&mut CounterRng::named(cfg.seed, "oracle/known", 0));

    let base = SamplerConfig {
        steps: cfg.steps,
        guidance_scale: 1.0,
        guidance_window: 0,
        jump_length: cfg.jump_length,
        repeats: 0,
        regret_window: None,
        decay: 0.0,
        sigma_mode: SigmaMode::DdpmLike,
        seed: cfg.seed,
    };
    let stochastic = moment_errors(&world, sched, &base, &shape, &known, &values, cfg.samples)?;
    let det_cfg = SamplerConfig {
        sigma_mode: SigmaMode::Deterministic,
        ..base.clone()
    };
    let deterministic = moment_errors(&world, sched, &det_cfg, &shape, &known, &values, cfg.samples)?;
    let regret_cfg = SamplerConfig {
        repeats: cfg.repeats,
        ..base
    };
    let regret = moment_errors(&world, sched, &regret_cfg, &shape, &known, &values, cfg.samples)?;

    let mut warnings = Vec::new();
    if cfg.samples < 100 {
        warnings.push(alloc::format!(
            "only {} samples; moment errors are dominated by Monte Carlo noise",
            cfg.samples
        ));
    }
    let stochastic_pass = stochastic.mean_error < cfg.mean_tolerance && stochastic.cov_error < cfg.cov_tolerance;
    let regret_pass = regret.mean_error <= stochastic.mean_error + cfg.regret_margin;
    Ok(OracleReport {
        samples: cfg.samples,
        steps: cfg.steps,
        stochastic,
        deterministic,
        regret,
        mean_tolerance: cfg.mean_tolerance,
        cov_tolerance: cfg.cov_tolerance,
        regret_margin: cfg.regret_margin,
        stochastic_pass,
        regret_pass,
        pass: stochastic_pass && regret_pass,
        warnings,
    })
}
