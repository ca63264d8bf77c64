//! PSNR and SSIM on `[0, 1]` valued videos.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)`, capped at 99 dB. `region`, when given, is a per-pixel
/// map of length `h * w` selecting the pixels of every frame and channel.
pub fn psnr(pred: &Tensor, reference: &Tensor, region: Option<&[bool]>) -> Result<f64> {
    pred.same_shape(reference)?;
    let (_, _, h, w) = pred.dims4()?;
    let hw = h * w;
    if let Some(r) = region {
        if r.len() != hw {
            bail!(Shape, "region map has {} entries for {}x{} frames", r.len(), h, w);
        }
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (i, (&a, &b)) in pred.data().iter().zip(reference.data()).enumerate() {
        if region.is_none_or(|r| r[i % hw]) {
            let e = a as f64 - b as f64;
            sum += e * e;
            n += 1;
        }
    }
    if n == 0 {
        bail!(Input, "empty evaluation region");
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            libm::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over valid 11x11 windows of one plane.
fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, g: &[f64]) -> f64 {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wgt = g[i] * g[j];
                    let x = a[(r + i) * w + c + j] as f64;
                    let y = b[(r + i) * w + c + j] as f64;
                    ma += wgt * x;
                    mb += wgt * y;
                    saa += wgt * x * x;
                    sbb += wgt * y * y;
                    sab += wgt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ssim_terms(ma, mb, va, vb, cov);
        }
    }
    total / (oh * ow) as f64
}

/// SSIM of one window from its moments.
pub fn ssim_terms(mean_a: f64, mean_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mean_a * mean_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mean_a * mean_a + mean_b * mean_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Gaussian-window SSIM averaged over frames and channels.
pub fn ssim(pred: &Tensor, reference: &Tensor) -> Result<f64> {
    pred.same_shape(reference)?;
    let (t, d, h, w) = pred.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(Input, "SSIM needs frames of at least {0}x{0}, got {1}x{2}", SSIM_WINDOW, h, w);
    }
    let g = gaussian_window();
    let hw = h * w;
    let mut total = 0.0;
    for plane in 0..t * d {
        let s = plane * hw;
        if pred.data()[s..s + hw] == reference.data()[s..s + hw] {
            total += 1.0;
        } else {
            total += ssim_plane(&pred.data()[s..s + hw], &reference.data()[s..s + hw], h, w, &g);
        }
    }
    Ok(total / (t * d) as f64)
}
