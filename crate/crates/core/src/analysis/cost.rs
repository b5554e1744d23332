use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::REPORT_VERSION;
use crate::adapters::{matmul_count, param_count, Adapter, AdapterConfig, AdapterKind, ForwardCounters, MatmulCount, ParamCount};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, OpCounter};

const WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub label: String,
    pub config: AdapterConfig,
    pub predicted: MatmulCount,
    pub measured: MatmulCount,
    /// Measured forward FLOPs at the report's batch size.
    pub flops: u64,
    pub params: ParamCount,
    pub counts_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub label: String,
    pub median_forward_us: f64,
    pub median_train_step_us: f64,
    pub forward_ratio_vs_lora: Option<f64>,
    pub train_ratio_vs_lora: Option<f64>,
    pub forward_ratio_vs_moelora: Option<f64>,
    pub train_ratio_vs_moelora: Option<f64>,
}

/// Wall-clock measurements. Kept apart from the counts because they vary
/// between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub trials: usize,
    pub warmup: usize,
    pub entries: Vec<TimingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub version: u64,
    pub batch: usize,
    pub entries: Vec<CostEntry>,
    /// Every measured count equals its prediction.
    pub counts_match: bool,
    pub timing: Option<Timing>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn prepare(configs: &[AdapterConfig], batch: usize, seed: u64) -> Result<Vec<(Adapter, Matrix, Matrix)>> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch must be positive".into()));
    }
    configs
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut rng = crate::rng::stream(seed, "bench", i as u64);
            let mut adapter = Adapter::init(cfg.clone())?;
            adapter.perturb(0.1, &mut rng);
            let x = Matrix::randn(batch, cfg.d_in, 1.0, &mut rng);
            let g = Matrix::randn(batch, cfg.d_out, 1.0, &mut rng);
            Ok((adapter, x, g))
        })
        .collect()
}

/// Predicted and measured matmul counts for each configuration.
pub fn cost_report(configs: &[AdapterConfig], batch: usize, seed: u64) -> Result<CostReport> {
    let prepared = prepare(configs, batch, seed)?;
    let mut entries = Vec::with_capacity(configs.len());
    for (adapter, x, _) in &prepared {
        let mut counters = ForwardCounters::default();
        adapter.forward(x, &mut counters)?;
        let cfg = adapter.config();
        let predicted = matmul_count(cfg);
        let measured = MatmulCount { branch_matmuls: counters.branch.matmul_calls, router_matmuls: counters.router.matmul_calls };
        entries.push(CostEntry {
            label: cfg.label(),
            config: cfg.clone(),
            predicted,
            measured,
            flops: counters.total().flops,
            params: param_count(cfg),
            counts_match: predicted == measured,
        });
    }
    Ok(CostReport {
        version: REPORT_VERSION,
        batch,
        counts_match: entries.iter().all(|e| e.counts_match),
        entries,
        timing: None,
    })
}

fn same_shape(a: &AdapterConfig, b: &AdapterConfig) -> bool {
    a.d_in == b.d_in && a.d_out == b.d_out
}

/// [`cost_report`] plus median forward and forward+backward times over
/// `trials` rounds. Rounds interleave the configurations so that drift in
/// machine load affects all of them alike.
pub fn latency_bench(configs: &[AdapterConfig], batch: usize, trials: usize, seed: u64) -> Result<CostReport> {
    if trials < 30 {
        return Err(Error::InvalidConfig(format!("latency_bench needs at least 30 trials, got {trials}")));
    }
    let mut report = cost_report(configs, batch, seed)?;
    let prepared = prepare(configs, batch, seed)?;
    let mut fwd = vec![Vec::with_capacity(trials); configs.len()];
    let mut step = vec![Vec::with_capacity(trials); configs.len()];
    for round in 0..WARMUP + trials {
        for (i, (adapter, x, g)) in prepared.iter().enumerate() {
            let t0 = Instant::now();
            let out = adapter.forward(x, &mut ForwardCounters::default())?;
            let t1 = Instant::now();
            let (out2, cache) = adapter.forward(x, &mut ForwardCounters::default())?;
            let grads = adapter.backward(&cache, g, &mut OpCounter::new())?;
            let t2 = Instant::now();
            std::hint::black_box((out, out2, grads));
            if round >= WARMUP {
                fwd[i].push((t1 - t0).as_secs_f64() * 1e6);
                step[i].push((t2 - t1).as_secs_f64() * 1e6);
            }
        }
    }
    let medians: Vec<(f64, f64)> = fwd.iter().zip(&step).map(|(f, s)| (median(f), median(s))).collect();
    let ratio_to = |i: usize, j: Option<usize>| j.map(|j| (medians[i].0 / medians[j].0, medians[i].1 / medians[j].1));
    let entries = configs
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let lora = configs.iter().position(|c| c.kind == AdapterKind::Lora && same_shape(c, cfg));
            let moe = configs.iter().position(|c| {
                c.kind == AdapterKind::MoELora
                    && c.router == AdapterKind::MoELora.default_router()
                    && c.k == cfg.k
                    && c.r_b == cfg.r_b
                    && same_shape(c, cfg)
            });
            let vs_lora = ratio_to(i, lora);
            let vs_moe = ratio_to(i, moe);
            TimingEntry {
                label: cfg.label(),
                median_forward_us: medians[i].0,
                median_train_step_us: medians[i].1,
                forward_ratio_vs_lora: vs_lora.map(|r| r.0),
                train_ratio_vs_lora: vs_lora.map(|r| r.1),
                forward_ratio_vs_moelora: vs_moe.map(|r| r.0),
                train_ratio_vs_moelora: vs_moe.map(|r| r.1),
            }
        })
        .collect();
    report.timing = Some(Timing { trials, warmup: WARMUP, entries });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn counts_match_predictions() {
        let configs = [
            AdapterConfig::lora(16, 12, 4, 1.0, 0),
            AdapterConfig::moelora(16, 12, 4, 2, 1.0, 0),
            AdapterConfig::teamlora(16, 12, 4, 2, 1.0, 0),
            AdapterConfig::teamlora(16, 12, 1, 4, 1.0, 0),
        ];
        let r = cost_report(&configs, 3, 0).unwrap();
        assert!(r.counts_match);
        assert_eq!(r.entries[2].measured.branch_matmuls, 5);
        assert_eq!(r.entries[3].measured.branch_matmuls, r.entries[0].measured.branch_matmuls);
        // Same branch FLOPs for symmetric and shared layouts.
        let branch_flops = |c: &AdapterConfig| {
            let mut fc = ForwardCounters::default();
            Adapter::init(c.clone()).unwrap().forward(&Matrix::zeros(3, 16), &mut fc).unwrap();
            fc.branch.flops
        };
        assert_eq!(branch_flops(&configs[1]), branch_flops(&configs[2]));
    }

    #[test]
    fn lora_against_itself_is_one() {
        let r = latency_bench(&[AdapterConfig::lora(8, 8, 2, 1.0, 0)], 2, 30, 0).unwrap();
        let t = &r.timing.unwrap().entries[0];
        assert_eq!(t.forward_ratio_vs_lora, Some(1.0));
        assert_eq!(t.train_ratio_vs_lora, Some(1.0));
    }

    #[test]
    fn too_few_trials() {
        assert!(latency_bench(&[AdapterConfig::lora(8, 8, 2, 1.0, 0)], 2, 29, 0).is_err());
    }
}
