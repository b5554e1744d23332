use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Optimizer state. Moment buffers are allocated lazily on the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.axpy(-lr, g)?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let (ps, gs) = (p.as_mut_slice(), g.as_slice());
                    for (((pi, &gi), mi), vi) in ps.iter_mut().zip(gs).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *pi -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = Matrix::from_rows(&[[1.25, -3.0, 0.0]]);
            let orig = p.clone();
            let g = Matrix::from_rows(&[[0.5, 2.0, -7.0]]);
            let mut opt = Optimizer::new(kind);
            opt.step(vec![&mut p], &[g], 0.0).unwrap();
            assert!(p.bit_eq(&orig));
        }
    }

    #[test]
    fn sgd_on_square() {
        // f = θ², g = 2θ = 2 at θ = 1.
        let mut p = Matrix::filled(1, 1, 1.0);
        Optimizer::new(OptimizerKind::Sgd).step(vec![&mut p], &[Matrix::filled(1, 1, 2.0)], 0.1).unwrap();
        assert!((p.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_about_lr_for_any_gradient_scale() {
        for scale in [1e-4, 1.0, 1e4] {
            let mut p = Matrix::zeros(1, 2);
            let g = Matrix::from_rows(&[[scale, -scale]]);
            Optimizer::new(OptimizerKind::adam()).step(vec![&mut p], &[g], 0.01).unwrap();
            // m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
            let expected = 0.01 * scale / (scale + 1e-8);
            assert!((p.get(0, 0) + expected).abs() < 1e-15);
            assert!((p.get(0, 0).abs() - 0.01).abs() < 1e-5);
        }
    }
}
