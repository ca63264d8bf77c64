//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Gradients are
//! only materialised for nodes that depend on a trainable leaf.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::ops::{self, GroupStats};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Temporal {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    GroupNorm {
        input: Var,
        gain: Var,
        shift: Var,
        groups: usize,
        stats: GroupStats,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Concat(Vec<Var>),
    SpatialScale {
        input: Var,
        map: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Single-owner record of operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value"))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = ops::dims2(self.value(a))?;
        let value = Tensor::new(&[n, m], ops::transpose(self.value(a).data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = ops::silu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let m = total / T::from_f64(x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn conv_p3d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::conv_p3d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv { input, kernel, bias }, rg))
    }

    pub fn temporal_conv(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let value =
            ops::temporal_conv(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Temporal { input, kernel, bias }, rg))
    }

    pub fn group_norm_3d(&mut self, input: Var, gain: Var, shift: Var, groups: usize, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let (t, c, h, w) = x.dims4()?;
        ops::check_groups(c, groups)?;
        if self.value(gain).len() != c || self.value(shift).len() != c {
            bail!(Shape, "group norm affine needs {} entries", c);
        }
        let (out, stats) = ops::group_norm_forward(
            x.data(),
            t,
            c,
            h * w,
            groups,
            self.value(gain).data(),
            self.value(shift).data(),
            eps,
        );
        let value = Tensor::new(&[t, c, h, w], out)?;
        let rg = self.rg(&[input, gain, shift]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gain,
                shift,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[t, c, h, w]` input.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(input).dims4()?;
        let b = self.value(bias);
        if b.len() != c {
            bail!(Shape, "channel bias has {} entries for {} channels", b.len(), c);
        }
        let hw = h * w;
        let mut value = self.value(input).clone();
        let bd = b.data().to_vec();
        for (i, plane) in value.data_mut().chunks_exact_mut(hw).enumerate() {
            let bv = bd[i % c];
            for v in plane {
                *v += bv;
            }
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    /// Concatenation of `[t, c_i, h, w]` inputs along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Shape, "nothing to concatenate");
        }
        let (t, _, h, w) = self.value(parts[0]).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pt, pc, ph, pw) = self.value(p).dims4()?;
            if (pt, ph, pw) != (t, h, w) {
                bail!(Shape, "concat of {:?} with {:?}", self.value(parts[0]).shape(), self.value(p).shape());
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(t * total * hw);
        for f in 0..t {
            for (&p, &pc) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[f * pc * hw..(f + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[t, total, h, w], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Multiplies every frame and channel of a `[t, c, h, w]` input by a fixed
    /// per-pixel map of length `h * w`.
    pub fn spatial_scale(&mut self, input: Var, map: Vec<T>) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        if map.len() != h * w {
            bail!(Shape, "spatial map of length {} for {}x{} features", map.len(), h, w);
        }
        let mut value = self.value(input).clone();
        for plane in value.data_mut().chunks_exact_mut(h * w) {
            for (v, &m) in plane.iter_mut().zip(&map) {
                *v *= m;
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SpatialScale { input, map }, rg))
    }

    /// Populates gradients of every trainable leaf reachable from `loss`.
    ///
    /// The tape is consumed: a second call is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            bail!(Contract, "tape already consumed by a backward pass");
        }
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.len());
        match &mut node.grad {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        // Each arm computes input gradients from immutable state, then accumulates.
        let mut updates: Vec<(Var, Vec<T>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                updates.push((*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                updates.push((*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()));
            }
            Op::Scale(a, s) => {
                let s = *s;
                updates.push((*a, g.iter().map(|&x| x * s).collect()));
            }
            Op::MatMul(a, b) => {
                let (m, k) = ops::dims2(self.value(*a))?;
                let (_, n) = ops::dims2(self.value(*b))?;
                let (ga, gb) = ops::matmul_backward(self.value(*a).data(), self.value(*b).data(), g, m, k, n);
                updates.push((*a, ga));
                updates.push((*b, gb));
            }
            Op::Transpose(a) => {
                let (m, n) = ops::dims2(self.value(*a))?;
                // g has shape [n, m].
                updates.push((*a, ops::transpose(g, n, m)));
            }
            Op::Reshape(a) => updates.push((*a, g.to_vec())),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                updates.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            let s = ops::sigmoid(xv);
                            gv * (s + xv * s * (T::one() - s))
                        })
                        .collect(),
                ));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                updates.push((*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                updates.push((*a, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::Conv { input, kernel, bias } => {
                let d = ops::conv_dims(self.value(*input), self.value(*kernel))?;
                let (gi, gk, gb) =
                    ops::conv_backward(self.value(*input).data(), self.value(*kernel).data(), g, &d);
                updates.push((*input, gi));
                updates.push((*kernel, gk));
                if let Some(b) = bias {
                    updates.push((*b, gb));
                }
            }
            Op::Temporal { input, kernel, bias } => {
                let d = ops::temporal_dims(self.value(*input), self.value(*kernel))?;
                let (gi, gk, gb) =
                    ops::temporal_backward(self.value(*input).data(), self.value(*kernel).data(), g, &d);
                updates.push((*input, gi));
                updates.push((*kernel, gk));
                if let Some(b) = bias {
                    updates.push((*b, gb));
                }
            }
            Op::GroupNorm {
                input,
                gain,
                shift,
                groups,
                stats,
            } => {
                let x = self.value(*input);
                let (t, c, h, w) = x.dims4()?;
                let (gi, gg, gs) =
                    ops::group_norm_backward(x.data(), t, c, h * w, *groups, self.value(*gain).data(), stats, g);
                updates.push((*input, gi));
                updates.push((*gain, gg));
                updates.push((*shift, gs));
            }
            Op::ChannelBias { input, bias } => {
                let (_, c, h, w) = self.value(*input).dims4()?;
                let mut gb = vec![T::zero(); c];
                for (p, plane) in g.chunks_exact(h * w).enumerate() {
                    gb[p % c] += plane.iter().fold(T::zero(), |acc, &v| acc + v);
                }
                updates.push((*input, g.to_vec()));
                updates.push((*bias, gb));
            }
            Op::Concat(parts) => {
                let (t, _, h, w) = self.nodes[i].value.dims4()?;
                let hw = h * w;
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &pc) in parts.iter().zip(&widths) {
                    let mut gp = Vec::with_capacity(t * pc * hw);
                    for f in 0..t {
                        let start = (f * total + offset) * hw;
                        gp.extend_from_slice(&g[start..start + pc * hw]);
                    }
                    updates.push((*p, gp));
                    offset += pc;
                }
            }
            Op::SpatialScale { input, map } => {
                let hw = map.len();
                let mut gi = g.to_vec();
                for plane in gi.chunks_exact_mut(hw) {
                    for (v, &m) in plane.iter_mut().zip(map) {
                        *v *= m;
                    }
                }
                updates.push((*input, gi));
            }
        }
        for (v, gv) in updates {
            if gv.len() != self.nodes[v.0].value.len() {
                return Err(crate::Error::Internal(format!("gradient length mismatch at node {}", v.0)));
            }
            self.accumulate(v, gv);
        }
        Ok(())
    }
}
