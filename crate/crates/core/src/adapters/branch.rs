//! Low-rank branch primitives shared by the three adapter kinds.

use crate::error::{Error, Result};
use crate::linalg::{matmul, split_columns, Matrix, OpCounter};

/// `(α/r)·x·A·B` with `r = A.cols`. Host term excluded.
pub fn lora_forward(a: &Matrix, b: &Matrix, alpha: f64, x: &Matrix, counter: &mut OpCounter) -> Result<Matrix> {
    Ok(lora_forward_cached(a, b, alpha, x, counter)?.1)
}

/// Same as [`lora_forward`] but also returns the intermediate `x·A`.
pub(crate) fn lora_forward_cached(
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    x: &Matrix,
    counter: &mut OpCounter,
) -> Result<(Matrix, Matrix)> {
    let scale = alpha / a.cols() as f64;
    let u = matmul(x, a, counter)?;
    let y = matmul(&u, b, counter)?.scale(scale);
    Ok((u, y))
}

/// Shared-`A` collaboration: `z = x·A`, split into `k` column blocks of width
/// `r_B`, and `h_i = (α/r_B)·z_i·B_i`. One product for `A`, one per expert.
pub fn collaboration_forward(
    a: &Matrix,
    bs: &[Matrix],
    alpha: f64,
    x: &Matrix,
    counter: &mut OpCounter,
) -> Result<Vec<Matrix>> {
    Ok(collaboration_forward_cached(a, bs, alpha, x, counter)?.1)
}

pub(crate) fn collaboration_forward_cached(
    a: &Matrix,
    bs: &[Matrix],
    alpha: f64,
    x: &Matrix,
    counter: &mut OpCounter,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let k = bs.len();
    if k == 0 || a.cols() % k != 0 {
        return Err(Error::NotDivisible { width: a.cols(), parts: k });
    }
    let scale = alpha / (a.cols() / k) as f64;
    let z = matmul(x, a, counter)?;
    let segments = split_columns(&z, k)?;
    let parts = segments
        .iter()
        .zip(bs)
        .map(|(zi, bi)| Ok(matmul(zi, bi, counter)?.scale(scale)))
        .collect::<Result<Vec<_>>>()?;
    Ok((segments, parts))
}

/// Per-token weighted sum `out[n] = Σ_i w[n,i]·h_i[n]`.
///
/// The first term initialises the accumulator, so a single expert with unit
/// weight reproduces its partial output bit for bit.
pub fn combine_experts(weights: &Matrix, parts: &[Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(Error::Degenerate("no expert outputs to combine".into()));
    };
    if weights.cols() != parts.len() || weights.rows() != first.rows() {
        return Err(Error::shape("combine_experts", weights.shape(), (first.rows(), parts.len())));
    }
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for n in 0..first.rows() {
        let w = weights.row(n);
        let row = out.row_mut(n);
        for (o, h) in row.iter_mut().zip(first.row(n)) {
            *o = w[0] * h;
        }
        for (i, part) in parts.iter().enumerate().skip(1) {
            for (o, h) in row.iter_mut().zip(part.row(n)) {
                *o += w[i] * h;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_hand_value() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]);
        let a = Matrix::from_rows(&[[2.0], [0.0]]);
        let b = Matrix::from_rows(&[[1.0, 3.0]]);
        let out = lora_forward(&a, &b, 1.0, &x, &mut OpCounter::new()).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[2.0, 6.0]]));
    }

    #[test]
    fn lora_zero_b_and_alpha_linearity() {
        let mut rng = crate::rng::stream(4, "t", 0);
        let x = Matrix::randn(3, 5, 1.0, &mut rng);
        let a = Matrix::randn(5, 2, 1.0, &mut rng);
        let b = Matrix::randn(2, 4, 1.0, &mut rng);
        let mut c = OpCounter::new();
        assert_eq!(lora_forward(&a, &Matrix::zeros(2, 4), 3.0, &x, &mut c).unwrap().max_abs(), 0.0);
        let one = lora_forward(&a, &b, 1.5, &x, &mut c).unwrap();
        let two = lora_forward(&a, &b, 3.0, &x, &mut c).unwrap();
        assert!(two.bit_eq(&one.scale(2.0)));
    }

    #[test]
    fn collaboration_hand_value() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        let bs = [Matrix::from_rows(&[[3.0, 0.0]]), Matrix::from_rows(&[[0.0, 4.0]])];
        let mut c = OpCounter::new();
        let h = collaboration_forward(&Matrix::identity(2), &bs, 1.0, &x, &mut c).unwrap();
        assert_eq!(h[0], Matrix::from_rows(&[[3.0, 0.0]]));
        assert_eq!(h[1], Matrix::from_rows(&[[0.0, 8.0]]));
        assert_eq!(c.matmul_calls, 3);
    }

    #[test]
    fn collaboration_with_one_expert_is_lora() {
        let mut rng = crate::rng::stream(9, "t", 0);
        let x = Matrix::randn(4, 6, 1.0, &mut rng);
        let a = Matrix::randn(6, 3, 1.0, &mut rng);
        let b = Matrix::randn(3, 5, 1.0, &mut rng);
        let mut c = OpCounter::new();
        let h = collaboration_forward(&a, std::slice::from_ref(&b), 2.0, &x, &mut c).unwrap();
        assert!(h[0].bit_eq(&lora_forward(&a, &b, 2.0, &x, &mut c).unwrap()));
    }

    #[test]
    fn combine_hand_value() {
        let w = Matrix::from_rows(&[[0.5, 0.5]]);
        let parts = [Matrix::from_rows(&[[3.0, 0.0]]), Matrix::from_rows(&[[0.0, 8.0]])];
        assert_eq!(combine_experts(&w, &parts).unwrap(), Matrix::from_rows(&[[1.5, 4.0]]));
    }
}
