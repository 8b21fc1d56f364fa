//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{MathError, MathResult};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One update of every tensor. A `None` gradient counts as zero.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> MathResult<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(MathError::Dimension(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.len() || state.m[i].len() != p.len() {
                return Err(MathError::Dimension(format!(
                    "adam: tensor {i} has {} values, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = grads[i].map_or(0.0, |g| g[j]);
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            data[j] -= hyper.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MathError::NonFinite(format!("adam update of tensor {i}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = [0.0, 0.0];
        for _ in 0..3 {
            adam_step(&mut p, &[Some(&g)], &mut s, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_bounded_by_learning_rate() {
        let h = AdamHyper::default();
        let mut p = vec![Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap()];
        let mut s = AdamState::new(&p);
        let g = [3.0, -1e-3, 0.5];
        adam_step(&mut p, &[Some(&g)], &mut s, &h).unwrap();
        for (x, gi) in p[0].data().iter().zip(g) {
            assert!(x.abs() <= h.learning_rate * (1.0 + 1e-6));
            assert_eq!(x.signum(), -gi.signum());
        }
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut p = vec![Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap()];
            let mut s = AdamState::new(&p);
            for k in 0..20 {
                let g: Vec<f64> = p[0].data().iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                adam_step(&mut p, &[Some(&g)], &mut s, &AdamHyper::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2, 2])];
        let mut s = AdamState::new(&p);
        let g = [0.0; 3];
        assert!(adam_step(&mut p, &[Some(&g)], &mut s, &AdamHyper::default()).is_err());
    }
}
