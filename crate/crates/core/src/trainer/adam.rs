use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Gradient, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_params(params: &ParamVector) -> Self {
        Self::new(params.len())
    }
}

/// One bias-corrected Adam step over every coordinate.
pub fn adam_update(params: &mut ParamVector, grad: &Gradient, state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    let all = [0..params.len()];
    adam_update_ranges(params, grad, state, hp, &all)
}

/// Adam step restricted to `ranges`; coordinates outside them, and their
/// moments, are left untouched. A non-finite gradient rejects the step.
pub fn adam_update_ranges(
    params: &mut ParamVector,
    grad: &Gradient,
    state: &mut AdamState,
    hp: &AdamParams,
    ranges: &[Range<usize>],
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("Adam: parameter, gradient and state sizes differ"));
    }
    if ranges.iter().flat_map(|r| &grad.values()[r.clone()]).any(|g| !g.is_finite()) {
        return Err(Error::invalid("Adam: non-finite gradient, step rejected"));
    }
    let t = state.t + 1;
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let mut next = params.values().to_vec();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for r in ranges {
        for i in r.clone() {
            let g = grad.values()[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            next[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("Adam: update produced non-finite parameters"));
    }
    params.values_mut().copy_from_slice(&next);
    state.m = m;
    state.v = v;
    state.t = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{value_and_grad, Binding, Tape};

    const HP: AdamParams = AdamParams {
        lr: 2e-4,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };

    fn pv(values: Vec<f64>) -> ParamVector {
        let n = values.len();
        ParamVector::builder().push("x", 1, n, values).build()
    }

    fn grad_of(params: &ParamVector, coeffs: &[f64]) -> Gradient {
        let c = crate::diffmath::Mat::row_vector(coeffs.to_vec());
        value_and_grad(|t: &Tape, b: Binding<'_>| Ok(b.get(t, "x")?.mul(t.constant(c.clone())).sum()), params)
            .unwrap()
            .1
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = pv(vec![0.3, -1.0]);
        let g = p.zero_gradient();
        let mut s = AdamState::for_params(&p);
        adam_update(&mut p, &g, &mut s, &HP).unwrap();
        assert_eq!(p.values(), &[0.3, -1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = pv(vec![1.0]);
        let g = grad_of(&p, &[1.0]);
        let mut s = AdamState::for_params(&p);
        adam_update(&mut p, &g, &mut s, &HP).unwrap();
        let step = 1.0 - p.values()[0];
        assert!((step - HP.lr / (1.0 + HP.eps)).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let mut p = pv(vec![0.5, 0.1, -0.2]);
            let mut s = AdamState::for_params(&p);
            for k in 0..20 {
                let g = grad_of(&p, &[1.0, -(k as f64), 0.5]);
                adam_update(&mut p, &g, &mut s, &HP).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ranges_freeze_other_coordinates() {
        let mut p = pv(vec![1.0, 2.0, 3.0]);
        let g = grad_of(&p, &[1.0, 1.0, 1.0]);
        let mut s = AdamState::for_params(&p);
        adam_update_ranges(&mut p, &g, &mut s, &HP, &[1..2]).unwrap();
        assert_eq!(p.values()[0], 1.0);
        assert_eq!(p.values()[2], 3.0);
        assert!(p.values()[1] < 2.0);
        assert_eq!(s.m[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = pv(vec![1.0]);
        let g = Gradient::from_values(&p, vec![f64::NAN]).unwrap();
        let mut s = AdamState::for_params(&p);
        assert!(adam_update(&mut p, &g, &mut s, &HP).is_err());
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(s, AdamState::new(1));
    }
}
