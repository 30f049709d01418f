use serde::{Deserialize, Serialize};

use super::NetworkParams;
use crate::error::{Error, Result};

/// Moment estimates for one parameter vector, stored flat in the
/// [`NetworkParams::flatten`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(p: &NetworkParams, lr: f64) -> Self {
        Self::new(p.param_count(), lr)
    }

    /// Bias-corrected update of a flat parameter vector in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state has {} entries, params {}, grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One Adam step on a network.
pub fn adam_step(params: &mut NetworkParams, state: &mut AdamState, grad: &NetworkParams) -> Result<()> {
    if params.architecture() != grad.architecture() {
        return Err(Error::ShapeMismatch("gradient architecture differs from parameters".into()));
    }
    let mut flat = params.flatten();
    state.update(&mut flat, &grad.flatten())?;
    *params = NetworkParams::unflatten(params.architecture(), &flat)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_network;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = vec![0.3, -0.2];
        let mut s = AdamState::new(2, 0.1);
        s.update(&mut w, &[0.0, 0.0]).unwrap();
        assert_eq!(w, vec![0.3, -0.2]);
    }

    #[test]
    fn first_step_is_lr() {
        let mut w = vec![0.0];
        let mut s = AdamState::new(1, 0.1);
        s.update(&mut w, &[1.0]).unwrap();
        assert!((w[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = vec![1.0];
        let mut s = AdamState::new(1, 0.05);
        for _ in 0..100 {
            let g = 2.0 * w[0];
            s.update(&mut w, &[g]).unwrap();
        }
        assert!(w[0].abs() < 0.1, "{}", w[0]);
    }

    #[test]
    fn zero_lr_identity() {
        let mut p = init_network(2, 2, 3, 8, 1).unwrap();
        let before = p.clone();
        let g = init_network(2, 2, 3, 8, 2).unwrap();
        let mut s = AdamState::for_params(&p, 0.0);
        adam_step(&mut p, &mut s, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = init_network(2, 2, 3, 8, 1).unwrap();
        let g = init_network(2, 2, 3, 4, 2).unwrap();
        let mut s = AdamState::for_params(&p, 0.1);
        assert!(matches!(adam_step(&mut p, &mut s, &g), Err(Error::ShapeMismatch(_))));
    }
}
