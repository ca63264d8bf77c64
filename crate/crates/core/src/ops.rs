//! Forward and backward kernels for the dense operations the denoiser needs.
//!
//! Video activations use the `[t, c, h, w]` layout. Pseudo-3D convolutions
//! carry a `[c_out, c_in, 1, 3, 3]` kernel and never look across frames; the
//! temporal convolution carries `[c_out, c_in, 3]` and never looks across
//! pixels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        bail!(Shape, "matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape());
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn dims2<T: Real>(a: &Tensor<T>) -> Result<(usize, usize)> {
    match *a.shape() {
        [m, n] => Ok((m, n)),
        _ => bail!(Shape, "expected matrix, got {:?}", a.shape()),
    }
}

fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `grad_a = g * b^T`, `grad_b = a^T * g`.
pub(crate) fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let bt = transpose(b, k, n);
    let mut ga = vec![T::zero(); m * k];
    matmul_into(g, &bt, m, n, k, &mut ga);
    let at = transpose(a, m, k);
    let mut gb = vec![T::zero(); k * n];
    matmul_into(&at, g, k, m, n, &mut gb);
    (ga, gb)
}

/// Row ranges of the output and the matching input offset for one tap.
#[inline]
fn tap_range(extent: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi = if offset > 0 { extent - offset as usize } else { extent };
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub t: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv_dims<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<ConvDims> {
    let (t, ci, h, w) = input.dims4()?;
    let (co, kci) = match *kernel.shape() {
        [co, kci, 1, 3, 3] => (co, kci),
        [_, _, kt, 3, 3] => bail!(Shape, "pseudo-3D kernel needs temporal extent 1, got {}", kt),
        _ => bail!(Shape, "expected [c_out, c_in, 1, 3, 3] kernel, got {:?}", kernel.shape()),
    };
    if kci != ci {
        bail!(Shape, "kernel expects {} input channels, input has {}", kci, ci);
    }
    Ok(ConvDims { t, ci, co, h, w })
}

/// Frame-wise 3x3 convolution with stride 1 and zero padding 1.
pub fn conv_p3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel)?;
    if let Some(b) = bias {
        if b.len() != d.co {
            bail!(Shape, "bias length {} for {} output channels", b.len(), d.co);
        }
    }
    let mut out = vec![T::zero(); d.t * d.co * d.h * d.w];
    conv_forward(input.data(), kernel.data(), bias.map(|b| b.data()), &d, &mut out);
    Tensor::new(&[d.t, d.co, d.h, d.w], out)
}

pub(crate) fn conv_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    let hw = d.h * d.w;
    for f in 0..d.t {
        for oc in 0..d.co {
            let out_plane = &mut out[(f * d.co + oc) * hw..(f * d.co + oc + 1) * hw];
            if let Some(b) = bias {
                out_plane.fill(b[oc]);
            }
            for ic in 0..d.ci {
                let in_plane = &input[(f * d.ci + ic) * hw..(f * d.ci + ic + 1) * hw];
                let taps = &kernel[(oc * d.ci + ic) * 9..(oc * d.ci + ic + 1) * 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y_lo, y_hi) = tap_range(d.h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x_lo, x_hi) = tap_range(d.w, dx);
                        let wv = taps[ky * 3 + kx];
                        for y in y_lo..y_hi {
                            let iy = (y as isize + dy) as usize;
                            let ix = (x_lo as isize + dx) as usize;
                            let orow = &mut out_plane[y * d.w + x_lo..y * d.w + x_hi];
                            let irow = &in_plane[iy * d.w + ix..iy * d.w + ix + (x_hi - x_lo)];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a pseudo-3D convolution: `(input, kernel, bias)`.
pub(crate) fn conv_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    d: &ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = d.h * d.w;
    let mut gin = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); d.co];
    for f in 0..d.t {
        for oc in 0..d.co {
            let g_plane = &grad_out[(f * d.co + oc) * hw..(f * d.co + oc + 1) * hw];
            gb[oc] += g_plane.iter().fold(T::zero(), |acc, &v| acc + v);
            for ic in 0..d.ci {
                let base = (f * d.ci + ic) * hw;
                let kbase = (oc * d.ci + ic) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y_lo, y_hi) = tap_range(d.h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x_lo, x_hi) = tap_range(d.w, dx);
                        let wv = kernel[kbase + ky * 3 + kx];
                        let mut acc = T::zero();
                        for y in y_lo..y_hi {
                            let iy = (y as isize + dy) as usize;
                            let ix = (x_lo as isize + dx) as usize;
                            let grow = &g_plane[y * d.w + x_lo..y * d.w + x_hi];
                            let start = base + iy * d.w + ix;
                            let irow = &input[start..start + (x_hi - x_lo)];
                            for (&g, &i) in grow.iter().zip(irow) {
                                acc += g * i;
                            }
                            let girow = &mut gin[start..start + (x_hi - x_lo)];
                            for (gi, &g) in girow.iter_mut().zip(grow) {
                                *gi += wv * g;
                            }
                        }
                        gk[kbase + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    (gin, gk, gb)
}

pub(crate) struct TemporalDims {
    pub t: usize,
    pub ci: usize,
    pub co: usize,
    pub hw: usize,
}

pub(crate) fn temporal_dims<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<TemporalDims> {
    let (t, ci, h, w) = input.dims4()?;
    let (co, kci) = match *kernel.shape() {
        [co, kci, 3] => (co, kci),
        _ => bail!(Shape, "expected [c_out, c_in, 3] temporal kernel, got {:?}", kernel.shape()),
    };
    if kci != ci {
        bail!(Shape, "temporal kernel expects {} channels, input has {}", kci, ci);
    }
    Ok(TemporalDims { t, ci, co, hw: h * w })
}

/// Width-3 convolution along the frame axis at every pixel, zero padded in time.
pub fn temporal_conv<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = temporal_dims(input, kernel)?;
    let (_, _, h, w) = input.dims4()?;
    let mut out = vec![T::zero(); d.t * d.co * d.hw];
    temporal_forward(input.data(), kernel.data(), bias.map(|b| b.data()), &d, &mut out);
    Tensor::new(&[d.t, d.co, h, w], out)
}

pub(crate) fn temporal_forward<T: Real>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    d: &TemporalDims,
    out: &mut [T],
) {
    for f in 0..d.t {
        for oc in 0..d.co {
            let out_plane = &mut out[(f * d.co + oc) * d.hw..(f * d.co + oc + 1) * d.hw];
            if let Some(b) = bias {
                out_plane.fill(b[oc]);
            }
            for k in 0..3 {
                let src = f as isize + k as isize - 1;
                if src < 0 || src as usize >= d.t {
                    continue;
                }
                let src = src as usize;
                for ic in 0..d.ci {
                    let wv = kernel[(oc * d.ci + ic) * 3 + k];
                    let in_plane = &input[(src * d.ci + ic) * d.hw..(src * d.ci + ic + 1) * d.hw];
                    for (o, &i) in out_plane.iter_mut().zip(in_plane) {
                        *o += wv * i;
                    }
                }
            }
        }
    }
}

pub(crate) fn temporal_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    d: &TemporalDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gin = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); d.co];
    for f in 0..d.t {
        for oc in 0..d.co {
            let g_plane = &grad_out[(f * d.co + oc) * d.hw..(f * d.co + oc + 1) * d.hw];
            gb[oc] += g_plane.iter().fold(T::zero(), |acc, &v| acc + v);
            for k in 0..3 {
                let src = f as isize + k as isize - 1;
                if src < 0 || src as usize >= d.t {
                    continue;
                }
                let src = src as usize;
                for ic in 0..d.ci {
                    let kidx = (oc * d.ci + ic) * 3 + k;
                    let wv = kernel[kidx];
                    let off = (src * d.ci + ic) * d.hw;
                    let mut acc = T::zero();
                    for ((&g, &i), gi) in g_plane
                        .iter()
                        .zip(&input[off..off + d.hw])
                        .zip(gin[off..off + d.hw].iter_mut())
                    {
                        acc += g * i;
                        *gi += wv * g;
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gin, gk, gb)
}

/// Per-group statistics saved by the group norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn check_groups(c: usize, groups: usize) -> Result<()> {
    if groups == 0 || c % groups != 0 {
        bail!(Config, "{} channels not divisible into {} groups", c, groups);
    }
    Ok(())
}

/// Group normalisation with statistics pooled over frames, pixels and the
/// channels of each group, followed by a per-channel affine map.
pub fn group_norm_3d<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (t, c, h, w) = input.dims4()?;
    check_groups(c, groups)?;
    if gain.len() != c || shift.len() != c {
        bail!(Shape, "group norm affine needs {} entries", c);
    }
    let (out, _) = group_norm_forward(input.data(), t, c, h * w, groups, gain.data(), shift.data(), eps);
    Tensor::new(&[t, c, h, w], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    t: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gain: &[T],
    shift: &[T],
    eps: f64,
) -> (Vec<T>, GroupStats) {
    let cg = c / groups;
    let n = (t * cg * hw) as f64;
    let mut stats = GroupStats {
        mean: vec![0.0; groups],
        rstd: vec![0.0; groups],
    };
    let mut out = vec![T::zero(); x.len()];
    for g in 0..groups {
        let planes = || {
            (0..t).flat_map(move |f| (g * cg..(g + 1) * cg).map(move |ch| (f * c + ch) * hw))
        };
        let mut sum = 0.0;
        for p in planes() {
            sum += x[p..p + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for p in planes() {
            sq += x[p..p + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let rstd = 1.0 / libm::sqrt(sq / n + eps);
        stats.mean[g] = mean;
        stats.rstd[g] = rstd;
        let (mean_t, rstd_t) = (T::from_f64(mean), T::from_f64(rstd));
        for p in planes() {
            let ch = (p / hw) % c;
            let (gn, sh) = (gain[ch], shift[ch]);
            for (o, &v) in out[p..p + hw].iter_mut().zip(&x[p..p + hw]) {
                *o = (v - mean_t) * rstd_t * gn + sh;
            }
        }
    }
    (out, stats)
}

/// Gradients of group norm: `(input, gain, shift)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Real>(
    x: &[T],
    t: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gain: &[T],
    stats: &GroupStats,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let n = (t * cg * hw) as f64;
    let mut gin = vec![T::zero(); x.len()];
    let mut ggain = vec![0.0f64; c];
    let mut gshift = vec![0.0f64; c];
    for g in 0..groups {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let planes = || {
            (0..t).flat_map(move |f| (g * cg..(g + 1) * cg).map(move |ch| (f * c + ch) * hw))
        };
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for p in planes() {
            let ch = (p / hw) % c;
            let gn = gain[ch].as_f64();
            for (&v, &go) in x[p..p + hw].iter().zip(&grad_out[p..p + hw]) {
                let xhat = (v.as_f64() - mean) * rstd;
                let go = go.as_f64();
                let dxhat = go * gn;
                s1 += dxhat;
                s2 += dxhat * xhat;
                ggain[ch] += go * xhat;
                gshift[ch] += go;
            }
        }
        for p in planes() {
            let ch = (p / hw) % c;
            let gn = gain[ch].as_f64();
            for ((&v, &go), gi) in x[p..p + hw]
                .iter()
                .zip(&grad_out[p..p + hw])
                .zip(gin[p..p + hw].iter_mut())
            {
                let xhat = (v.as_f64() - mean) * rstd;
                let dxhat = go.as_f64() * gn;
                *gi = T::from_f64(rstd * (dxhat - s1 / n - xhat * s2 / n));
            }
        }
    }
    (
        gin,
        ggain.into_iter().map(T::from_f64).collect(),
        gshift.into_iter().map(T::from_f64).collect(),
    )
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_libm())
}

/// Sigmoid-weighted linear unit.
pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::randn;

    #[test]
    fn matmul_identity_and_hand_values() {
        let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = randn(&[3, 2], 3).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(&[2, 1], vec![5., 6.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = randn(&[3, 1, 5, 6], 2).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 1, 3, 3]).unwrap();
        k.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1]).unwrap();
        assert_eq!(conv_p3d(&x, &k, Some(&b)).unwrap(), x);
    }

    #[test]
    fn conv_padded_window_counts() {
        let x = Tensor::full(&[5, 1, 4, 4], 1.0f32).unwrap();
        let k = Tensor::full(&[1, 1, 1, 3, 3], 1.0f32).unwrap();
        let y = conv_p3d(&x, &k, None).unwrap();
        assert_eq!(y.shape(), &[5, 1, 4, 4]);
        let frame = &y.data()[..16];
        assert_eq!(frame[0], 4.0);
        assert_eq!(frame[3], 4.0);
        assert_eq!(frame[1], 6.0);
        assert_eq!(frame[5], 9.0);
        assert_eq!(frame[10], 9.0);
    }

    #[test]
    fn conv_rejects_bad_kernels() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let k = Tensor::zeros(&[1, 3, 1, 3, 3]).unwrap();
        assert!(matches!(conv_p3d(&x, &k, None), Err(Error::Shape(_))));
        let k = Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
        assert!(matches!(conv_p3d(&x, &k, None), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_keeps_frames_separate() {
        let x = randn(&[4, 2, 5, 5], 11).unwrap();
        let k = randn(&[3, 2, 1, 3, 3], 12).unwrap();
        let base = conv_p3d(&x, &k, None).unwrap();
        let mut bumped = x.clone();
        let frame = 2 * 5 * 5;
        for v in &mut bumped.data_mut()[2 * frame..3 * frame] {
            *v += 1.0;
        }
        let y = conv_p3d(&bumped, &k, None).unwrap();
        let out_frame = 3 * 5 * 5;
        for f in 0..4 {
            let a = &base.data()[f * out_frame..(f + 1) * out_frame];
            let b = &y.data()[f * out_frame..(f + 1) * out_frame];
            assert_eq!(a == b, f != 2, "frame {}", f);
        }
    }

    #[test]
    fn group_norm_constant_and_affine() {
        let x = Tensor::full(&[2, 4, 3, 3], 0.7f32).unwrap();
        let one = Tensor::full(&[4], 1.0f32).unwrap();
        let zero = Tensor::zeros(&[4]).unwrap();
        let y = group_norm_3d(&x, 2, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = randn(&[2, 4, 3, 3], 5).unwrap();
        let three = Tensor::full(&[4], 3.0f32).unwrap();
        let y = group_norm_3d(&x, 2, &zero, &three, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn group_norm_statistics() {
        let x = randn(&[2, 4, 3, 3], 9).unwrap();
        let one = Tensor::full(&[4], 1.0f32).unwrap();
        let zero = Tensor::zeros(&[4]).unwrap();
        let y = group_norm_3d(&x, 2, &one, &zero, 1e-5).unwrap();
        for g in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|f| (g * 2..g * 2 + 2).map(move |c| (f * 4 + c) * 9))
                .flat_map(|p| y.data()[p..p + 9].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "group {} mean {}", g, mean);
            assert!((var - 1.0).abs() < 1e-3, "group {} var {}", g, var);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]).unwrap();
        let a = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(group_norm_3d(&x, 2, &a, &a, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_conv_reaches_one_frame_each_way() {
        let x = randn(&[6, 2, 3, 3], 4).unwrap();
        let k = randn(&[2, 2, 3], 5).unwrap();
        let base = temporal_conv(&x, &k, None).unwrap();
        let mut bumped = x.clone();
        let frame = 18;
        for v in &mut bumped.data_mut()[4 * frame..5 * frame] {
            *v += 1.0;
        }
        let y = temporal_conv(&bumped, &k, None).unwrap();
        for f in 0..6 {
            let changed = base.data()[f * frame..(f + 1) * frame] != y.data()[f * frame..(f + 1) * frame];
            assert_eq!(changed, (3..=5).contains(&f), "frame {}", f);
        }
    }
}
