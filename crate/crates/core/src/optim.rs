//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One update of `z` in place. `iteration` only labels errors.
pub fn adam_step(z: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, iteration: usize) -> Result<()> {
    if z.len() != grad.len() || z.len() != state.m.len() {
        return Err(Error::shape("adam_step", z.len(), format!("grad {} / moments {}", grad.len(), state.m.len())));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            iteration,
            reason: format!("non-finite gradient {} at index {i}", grad[i]),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..z.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        z[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut z = vec![0.3, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut z, &[0.0, 0.0], &mut s, 0.1, 0).unwrap();
        assert_eq!(z, vec![0.3, -1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let mut z = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut z, &[f64::NAN], &mut s, 0.1, 7),
            Err(Error::Numeric { iteration: 7, .. })
        ));
    }

    proptest! {
        #[test]
        fn first_step_moves_by_lr(g in prop_oneof![1e-2..1e3f64, -1e3..-1e-2f64], lr in 1e-5..1e-1f64) {
            let mut z = vec![1.0];
            let mut s = AdamState::new(1);
            adam_step(&mut z, &[g], &mut s, lr, 0).unwrap();
            prop_assert!(((1.0 - z[0]).abs() - lr).abs() < 1e-6);
            prop_assert_eq!((1.0 - z[0]).signum(), g.signum());
        }
    }
}
