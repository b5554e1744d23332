//! Participation routers.
//!
//! `LinearRouter` is the single affine gate used by MoELoRA: `ω = softmax(x·W)`.
//! `ShapleyRouter` is the competition module: a two-layer tanh MLP estimates
//! per-expert Shapley shares `φ = softmax(S(x))`, and a learnable interaction
//! matrix adjusts them, `ω[n,i] = Σ_j M[i,j]·φ[n,j]`. `ω` is left unnormalised.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, softmax_rows, Matrix, OpCounter};

/// Per-token router output. For the linear router `phi == omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterOutput {
    pub phi: Matrix,
    pub omega: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRouter {
    pub w: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyRouter {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub m: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    LinearSoftmax(LinearRouter),
    ShapleyInteraction(ShapleyRouter),
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub enum RouterCache {
    Linear,
    Shapley { hidden: Matrix },
}

/// Backward of a row softmax: `dz = φ ⊙ (dφ − <φ, dφ>)` row by row.
pub(crate) fn softmax_backward(phi: &Matrix, d_phi: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(phi.rows(), phi.cols());
    for n in 0..phi.rows() {
        let p = phi.row(n);
        let g = d_phi.row(n);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pi, gi)) in out.row_mut(n).iter_mut().zip(p.iter().zip(g)) {
            *o = pi * (gi - dot);
        }
    }
    out
}

impl LinearRouter {
    pub fn init<R: Rng + ?Sized>(d_in: usize, k: usize, rng: &mut R) -> Self {
        Self { w: Matrix::randn(d_in, k, (1.0 / d_in as f64).sqrt(), rng) }
    }

    pub fn forward(&self, x: &Matrix, counter: &mut OpCounter) -> Result<(RouterOutput, RouterCache)> {
        let logits = matmul(x, &self.w, counter)?;
        let phi = softmax_rows(&logits);
        Ok((RouterOutput { omega: phi.clone(), phi }, RouterCache::Linear))
    }

    /// Returns `(dx, [dW])`.
    pub fn backward(
        &self,
        x: &Matrix,
        out: &RouterOutput,
        d_omega: &Matrix,
        counter: &mut OpCounter,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let d_logits = softmax_backward(&out.phi, d_omega);
        let dw = matmul(&x.transpose(), &d_logits, counter)?;
        let dx = matmul(&d_logits, &self.w.transpose(), counter)?;
        Ok((dx, vec![dw]))
    }
}

impl ShapleyRouter {
    /// MLP weights ~ N(0, 1/fan_in), zero biases, `M` with unit diagonal and
    /// `U[0,1)` off-diagonal entries.
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        let w1 = Matrix::randn(d_in, hidden, (1.0 / d_in as f64).sqrt(), rng);
        let w2 = Matrix::randn(hidden, k, (1.0 / hidden as f64).sqrt(), rng);
        let mut m = Matrix::uniform(k, k, 0.0, 1.0, rng);
        for i in 0..k {
            m.set(i, i, 1.0);
        }
        Self { w1, b1: Matrix::zeros(1, hidden), w2, b2: Matrix::zeros(1, k), m }
    }

    pub fn experts(&self) -> usize {
        self.m.rows()
    }

    pub fn forward(&self, x: &Matrix, counter: &mut OpCounter) -> Result<(RouterOutput, RouterCache)> {
        let hidden = matmul(x, &self.w1, counter)?.add_row_broadcast(&self.b1)?.map(f64::tanh);
        let logits = matmul(&hidden, &self.w2, counter)?.add_row_broadcast(&self.b2)?;
        let phi = softmax_rows(&logits);
        let omega = matmul(&phi, &self.m.transpose(), counter)?;
        Ok((RouterOutput { phi, omega }, RouterCache::Shapley { hidden }))
    }

    /// Returns `(dx, [dW1, db1, dW2, db2, dM])`.
    pub fn backward(
        &self,
        x: &Matrix,
        out: &RouterOutput,
        hidden: &Matrix,
        d_omega: &Matrix,
        counter: &mut OpCounter,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let dm = matmul(&d_omega.transpose(), &out.phi, counter)?;
        let d_phi = matmul(d_omega, &self.m, counter)?;
        let d_logits = softmax_backward(&out.phi, &d_phi);
        let dw2 = matmul(&hidden.transpose(), &d_logits, counter)?;
        let db2 = d_logits.col_sums();
        let d_hidden = matmul(&d_logits, &self.w2.transpose(), counter)?;
        let d_pre = d_hidden.hadamard(&hidden.map(|h| 1.0 - h * h))?;
        let dw1 = matmul(&x.transpose(), &d_pre, counter)?;
        let db1 = d_pre.col_sums();
        let dx = matmul(&d_pre, &self.w1.transpose(), counter)?;
        Ok((dx, vec![dw1, db1, dw2, db2, dm]))
    }
}

/// φ from the Shapley MLP and ω after the interaction matrix.
pub fn competition_weights(router: &ShapleyRouter, x: &Matrix, counter: &mut OpCounter) -> Result<RouterOutput> {
    if x.cols() != router.w1.rows() {
        return Err(Error::shape("competition_weights", x.shape(), router.w1.shape()));
    }
    router.forward(x, counter).map(|(out, _)| out)
}

impl Router {
    pub fn forward(&self, x: &Matrix, counter: &mut OpCounter) -> Result<(RouterOutput, RouterCache)> {
        match self {
            Router::LinearSoftmax(r) => r.forward(x, counter),
            Router::ShapleyInteraction(r) => r.forward(x, counter),
        }
    }

    pub fn backward(
        &self,
        x: &Matrix,
        out: &RouterOutput,
        cache: &RouterCache,
        d_omega: &Matrix,
        counter: &mut OpCounter,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        match (self, cache) {
            (Router::LinearSoftmax(r), RouterCache::Linear) => r.backward(x, out, d_omega, counter),
            (Router::ShapleyInteraction(r), RouterCache::Shapley { hidden }) => {
                r.backward(x, out, hidden, d_omega, counter)
            }
            _ => Err(Error::BackwardBeforeForward),
        }
    }

    pub(crate) fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Router::LinearSoftmax(r) => vec![("router.W", &r.w)],
            Router::ShapleyInteraction(r) => vec![
                ("S.W1", &r.w1),
                ("S.b1", &r.b1),
                ("S.W2", &r.w2),
                ("S.b2", &r.b2),
                ("M", &r.m),
            ],
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Router::LinearSoftmax(r) => vec![("router.W", &mut r.w)],
            Router::ShapleyInteraction(r) => vec![
                ("S.W1", &mut r.w1),
                ("S.b1", &mut r.b1),
                ("S.W2", &mut r.w2),
                ("S.b2", &mut r.b2),
                ("M", &mut r.m),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router_with_m(m: Matrix, d_in: usize) -> ShapleyRouter {
        let k = m.rows();
        let mut rng = crate::rng::stream(11, "test", 0);
        let mut r = ShapleyRouter::init(d_in, 2 * k, k, &mut rng);
        r.m = m;
        r
    }

    #[test]
    fn identity_interaction_leaves_phi_unchanged() {
        let r = router_with_m(Matrix::identity(3), 4);
        let x = Matrix::randn(5, 4, 1.0, &mut crate::rng::stream(1, "x", 0));
        let out = competition_weights(&r, &x, &mut OpCounter::new()).unwrap();
        assert!(out.omega.max_abs_diff(&out.phi).unwrap() == 0.0);
    }

    #[test]
    fn all_ones_interaction_gives_unit_participation() {
        let r = router_with_m(Matrix::filled(3, 3, 1.0), 4);
        let x = Matrix::randn(5, 4, 1.0, &mut crate::rng::stream(2, "x", 0));
        let out = competition_weights(&r, &x, &mut OpCounter::new()).unwrap();
        for v in out.omega.as_slice() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interaction_row_hand_value() {
        // ω₁ = 1·0.2 + 0.5·0.3 + 0·0.5
        let phi = Matrix::from_rows(&[[0.2, 0.3, 0.5]]);
        let m = Matrix::from_rows(&[[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let omega = matmul(&phi, &m.transpose(), &mut OpCounter::new()).unwrap();
        assert!((omega.get(0, 0) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn init_sets_unit_diagonal_and_unit_interval_off_diagonal() {
        let mut rng = crate::rng::stream(5, "test", 0);
        let r = ShapleyRouter::init(6, 6, 3, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let v = r.m.get(i, j);
                if i == j {
                    assert_eq!(v, 1.0);
                } else {
                    assert!((0.0..1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let r = router_with_m(Matrix::identity(2), 4);
        assert!(competition_weights(&r, &Matrix::zeros(1, 3), &mut OpCounter::new()).is_err());
    }
}
