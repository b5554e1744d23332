//! Monte-Carlo fuzzy Shapley value of one expert.
//!
//! `φ̂_i = E[v(ω_i, s) − v(0, s)]` with `ω_i ~ U[0, 1)` and the other experts'
//! participations `s` drawn from a symmetric Dirichlet(1) scaled to total mass
//! `1 − ω_i`. The payoff `v` is the negative mean eval loss with every routed
//! adapter's weights fixed to the sampled profile.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::routed_experts;
use crate::adapters::{AdapterConfig, Participation};
use crate::error::{Error, Result};
use crate::host::FrozenHost;
use crate::tasks::{gen_multitask, Dataset, DatasetSpec, Split, TaskMode};
use crate::train::{evaluate, LossKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub expert: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub estimate: f64,
    pub std_error: f64,
}

/// Negative mean eval loss with expert weights fixed to `weights`.
pub fn payoff(host: &FrozenHost, ds: &Dataset, loss: LossKind, weights: &[f64]) -> Result<f64> {
    Ok(-evaluate(host, ds, loss, &Participation::Fixed(weights.to_vec()))?.mean_loss)
}

/// Draw `(ω_i, s)` where `s` has length `k` with `s[expert] = 0` and the
/// other entries summing to `1 − ω_i`.
pub fn sample_profile<R: Rng + ?Sized>(k: usize, expert: usize, rng: &mut R) -> (f64, Vec<f64>) {
    let omega: f64 = rng.random();
    let mut s = vec![0.0; k];
    let mut total = 0.0;
    for (j, sj) in s.iter_mut().enumerate() {
        if j != expert {
            // Exponential(1) draws normalized to the simplex are Dirichlet(1).
            let u: f64 = rng.random();
            *sj = -(1.0 - u).ln();
            total += *sj;
        }
    }
    if total > 0.0 {
        for (j, sj) in s.iter_mut().enumerate() {
            if j != expert {
                *sj *= (1.0 - omega) / total;
            }
        }
    } else {
        // All draws were exactly zero; spread the mass evenly.
        let share = (1.0 - omega) / (k - 1) as f64;
        s.iter_mut().enumerate().filter(|(j, _)| *j != expert).for_each(|(_, sj)| *sj = share);
    }
    (omega, s)
}

pub fn shapley_mc(
    host: &FrozenHost,
    ds: &Dataset,
    loss: LossKind,
    expert: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ShapleyEstimate> {
    let k = routed_experts(host)?.unwrap_or(1);
    if k < 2 {
        return Err(Error::Degenerate("Shapley value needs at least two experts".into()));
    }
    if expert >= k {
        return Err(Error::InvalidConfig(format!("expert {expert} out of range for k = {k}")));
    }
    if n_samples < 100 {
        return Err(Error::InvalidConfig(format!("shapley_mc needs at least 100 samples, got {n_samples}")));
    }
    let mut rng = crate::rng::stream(seed, "shapley", expert as u64);
    let mut diffs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (omega, mut s) = sample_profile(k, expert, &mut rng);
        let without = payoff(host, ds, loss, &s)?;
        s[expert] = omega;
        let with = payoff(host, ds, loss, &s)?;
        diffs.push(with - without);
    }
    let n = n_samples as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ShapleyEstimate { expert, n_samples, seed, estimate: mean, std_error: (var / n).sqrt() })
}

/// A tiny host with a perturbed TeamLoRA adapter (`k` experts) on its first
/// layer and a two-task eval set, small enough for grid quadrature.
pub fn shapley_fixture(k: usize, seed: u64) -> Result<(FrozenHost, Dataset)> {
    let spec = DatasetSpec {
        n_tasks: 2,
        n_per_task: 24,
        feature_dim: 4,
        output_dim: 3,
        mode: TaskMode::Classification,
        noise_std: 0.0,
        seed,
    };
    let ds = gen_multitask(&spec, Split::Eval)?;
    let mut host = FrozenHost::build(&[6, 8, 3], seed)?;
    host.attach_adapter(0, AdapterConfig::teamlora(6, 8, k, 2, 4.0, seed))?;
    let mut rng = crate::rng::stream(seed, "fixture", 0);
    host.adapter_mut(0).expect("attached").perturb(0.7, &mut rng);
    Ok((host, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_lie_on_the_simplex() {
        let mut rng = crate::rng::stream(0, "t", 0);
        for k in 2..6 {
            for _ in 0..50 {
                let (omega, s) = sample_profile(k, 1, &mut rng);
                assert!((0.0..1.0).contains(&omega));
                assert_eq!(s[1], 0.0);
                assert!(s.iter().all(|&v| v >= 0.0));
                assert!((s.iter().sum::<f64>() - (1.0 - omega)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_experts_get_the_remaining_mass() {
        let mut rng = crate::rng::stream(1, "t", 0);
        let (omega, s) = sample_profile(2, 0, &mut rng);
        assert!((s[1] - (1.0 - omega)).abs() < 1e-15);
    }
}
