//! Adaptive-moment gradient descent with the gradient-penalty-training
//! convention β = (0.5, 0.9).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter set, in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_shapes(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_tensors(tensors: &[&Array2<f64>]) -> Self {
        let shapes: Vec<_> = tensors.iter().map(|t| t.dim()).collect();
        Self::for_shapes(&shapes)
    }

    /// One bias-corrected update over all tensors of the set.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
        cfg: &AdamConfig,
    ) {
        assert_eq!(params.len(), self.m.len(), "adam tensor count");
        assert_eq!(grads.len(), self.m.len(), "adam gradient count");
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.dim(), g.dim(), "adam shape");
            azip(m, g, |m, g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            azip(v, g, |v, g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            for ((pe, me), ve) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = me / b1t;
                let vhat = ve / b2t;
                *pe -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

fn azip(a: &mut Array2<f64>, b: &Array2<f64>, f: impl Fn(&mut f64, f64)) {
    for (x, &y) in a.iter_mut().zip(b.iter()) {
        f(x, y);
    }
}
