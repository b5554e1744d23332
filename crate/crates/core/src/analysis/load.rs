use serde::{Deserialize, Serialize};

use super::REPORT_VERSION;
use crate::adapters::{argmax, RouterKind};
use crate::error::{Error, Result};
use crate::host::FrozenHost;
use crate::linalg::OpCounter;
use crate::tasks::Dataset;

/// Expert load for one adapter layer. Rows are tasks, columns experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    pub label: String,
    pub k: usize,
    pub router: Option<RouterKind>,
    /// Mean `ω` per (task, expert).
    pub mean_omega: Vec<Vec<f64>>,
    pub omega_row_sums: Vec<f64>,
    /// Fraction of tokens whose largest `ω` is each expert.
    pub argmax_share: Vec<Vec<f64>>,
    /// Entropy of each `mean_omega` row after clipping at 0 and normalizing.
    pub entropy: Vec<f64>,
    pub argmax_entropy: Vec<f64>,
    pub max_entropy: f64,
    /// Fraction of (token, expert) weights below zero.
    pub negative_omega_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub version: u64,
    pub layers: Vec<LayerLoad>,
}

/// Shannon entropy (nats) of `weights` clipped at zero and normalized.
/// Returns 0 for a single weight or zero total mass, and never exceeds `ln k`.
pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if weights.len() <= 1 || !(total > 0.0) {
        return 0.0;
    }
    let h = weights
        .iter()
        .map(|w| w.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .fold(0.0, |acc, p| acc - p * p.ln());
    // Rounding can put a uniform distribution a few ulps above ln k.
    h.min((weights.len() as f64).ln())
}

pub fn expert_utilization(host: &FrozenHost, ds: &Dataset) -> Result<LoadReport> {
    let adapters: Vec<(usize, String, usize, Option<RouterKind>)> = host
        .adapters()
        .map(|(l, a)| (l, a.config().label(), a.experts(), a.config().router))
        .collect();
    if adapters.is_empty() {
        return Err(Error::InvalidConfig("no adapters attached".into()));
    }
    let n_tasks = ds.n_tasks();
    let mut layers: Vec<LayerLoad> = adapters
        .iter()
        .map(|(layer, label, k, router)| LayerLoad {
            layer: *layer,
            label: label.clone(),
            k: *k,
            router: *router,
            mean_omega: vec![vec![0.0; *k]; n_tasks],
            omega_row_sums: vec![0.0; n_tasks],
            argmax_share: vec![vec![0.0; *k]; n_tasks],
            entropy: vec![0.0; n_tasks],
            argmax_entropy: vec![0.0; n_tasks],
            max_entropy: (*k as f64).ln(),
            negative_omega_frequency: 0.0,
        })
        .collect();
    let mut negatives = vec![0usize; layers.len()];
    let mut entries = vec![0usize; layers.len()];

    for t in 0..n_tasks {
        let idx = ds.task_indices(t);
        let (x, _) = ds.batch(&idx);
        let (_, trace) = host.forward(&x, &mut OpCounter::new())?;
        for (j, load) in layers.iter_mut().enumerate() {
            let cache = trace.layers[load.layer].adapter.as_ref().expect("adapter attached");
            let n = x.rows();
            match cache.weights() {
                Some(w) => {
                    let mut sums = vec![0.0; load.k];
                    let mut wins = vec![0usize; load.k];
                    for row in 0..n {
                        let r = w.row(row);
                        for (s, v) in sums.iter_mut().zip(r) {
                            *s += v;
                        }
                        wins[argmax(r)] += 1;
                        negatives[j] += r.iter().filter(|&&v| v < 0.0).count();
                    }
                    entries[j] += n * load.k;
                    load.mean_omega[t] = sums.iter().map(|s| s / n as f64).collect();
                    load.argmax_share[t] = wins.iter().map(|&c| c as f64 / n as f64).collect();
                }
                None => {
                    load.mean_omega[t] = vec![1.0];
                    load.argmax_share[t] = vec![1.0];
                    entries[j] += n;
                }
            }
            load.omega_row_sums[t] = load.mean_omega[t].iter().sum();
            load.entropy[t] = entropy(&load.mean_omega[t]);
            load.argmax_entropy[t] = entropy(&load.argmax_share[t]);
        }
    }
    for (j, load) in layers.iter_mut().enumerate() {
        load.negative_omega_frequency = negatives[j] as f64 / entries[j].max(1) as f64;
    }
    Ok(LoadReport { version: REPORT_VERSION, layers })
}
