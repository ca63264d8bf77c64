//! Central finite-difference check of tape gradients.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval(inputs: &[Tensor<f64>], f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        bail!(Shape, "gradient check needs a scalar output, got {:?}", v.shape());
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of `f` at `inputs` with central differences of
/// step `h` on every element of every input.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut probe = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn polynomial() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&[x], 1e-4, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let cube = t.mul(sq, v[0])?;
            Ok(t.sum(cube))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-7, "{:?}", r);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A constant leaf inside f hides the dependence from the tape.
        let x = Tensor::new(&[1], vec![1.5]).unwrap();
        let r = check_gradients(&[x], 1e-4, |t, v| {
            let detached = t.leaf(t.value(v[0]).clone());
            let y = t.mul(v[0], detached)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
