use serde::{Deserialize, Serialize};

use super::REPORT_VERSION;
use crate::adapters::{AdapterKind, RouterKind};
use crate::error::{Error, Result};
use crate::host::{AdapterSpec, FrozenHost};
use crate::tasks::Dataset;
use crate::train::{evaluate, train, TrainConfig};
use crate::adapters::Participation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub host_dims: Vec<usize>,
    pub host_seed: u64,
    /// Supplies `k`, `r_b`, `alpha`, `s_hidden` and `layers`; kind and router
    /// are set per cell.
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    /// Each seed drives adapter initialization and batch order.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub collaboration: bool,
    pub competition: bool,
    pub label: String,
    pub adapter: AdapterSpec,
    pub adapter_params: u64,
    pub router_params: u64,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u64,
    pub seeds: Vec<u64>,
    /// Rows in the order (−,−), (competition), (collaboration), (both).
    pub rows: Vec<AblationCell>,
    /// Every cell has the same low-rank branch parameter count.
    pub params_matched: bool,
    /// Seeds where the full model scores at least the baseline.
    pub teamlora_wins: usize,
}

/// Collaboration selects the shared-`A` split over symmetric experts;
/// competition selects the Shapley-interaction router over linear softmax.
pub fn cell_spec(collaboration: bool, competition: bool, base: &AdapterSpec) -> AdapterSpec {
    AdapterSpec {
        kind: if collaboration { AdapterKind::TeamLora } else { AdapterKind::MoELora },
        router: Some(if competition { RouterKind::ShapleyInteraction } else { RouterKind::LinearSoftmax }),
        ..base.clone()
    }
}

fn cell_label(collaboration: bool, competition: bool) -> &'static str {
    match (collaboration, competition) {
        (false, false) => "MoELoRA",
        (false, true) => "+competition",
        (true, false) => "+collaboration",
        (true, true) => "TeamLoRA",
    }
}

fn run_cell(spec: &AblationSpec, adapter: &AdapterSpec, seed: u64, train_ds: &Dataset, eval_ds: &Dataset) -> Result<(FrozenHost, f64)> {
    let mut host = FrozenHost::build(&spec.host_dims, spec.host_seed)?;
    adapter.attach(&mut host, seed)?;
    let cfg = TrainConfig { seed, ..spec.train.clone() };
    train(&mut host, train_ds, Some(eval_ds), &cfg)?;
    let acc = evaluate(&host, eval_ds, cfg.loss, &Participation::Routed)?.mean_accuracy;
    Ok((host, acc))
}

/// Train and evaluate the four cells for every seed.
pub fn ablation_grid(train_ds: &Dataset, eval_ds: &Dataset, spec: &AblationSpec) -> Result<AblationReport> {
    if spec.seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(4);
    for (collaboration, competition) in [(false, false), (false, true), (true, false), (true, true)] {
        let adapter = cell_spec(collaboration, competition, &spec.adapter);
        let mut per_seed_accuracy = Vec::with_capacity(spec.seeds.len());
        let mut counts = (0, 0);
        for &seed in &spec.seeds {
            let (host, acc) = run_cell(spec, &adapter, seed, train_ds, eval_ds)?;
            per_seed_accuracy.push(acc);
            counts = host.adapters().fold((0, 0), |(a, r), (_, ad)| {
                let p = ad.param_count();
                (a + p.adapter_params, r + p.router_params)
            });
        }
        rows.push(AblationCell {
            collaboration,
            competition,
            label: cell_label(collaboration, competition).to_string(),
            adapter,
            adapter_params: counts.0,
            router_params: counts.1,
            mean_accuracy: per_seed_accuracy.iter().sum::<f64>() / per_seed_accuracy.len() as f64,
            per_seed_accuracy,
        });
    }
    let teamlora_wins = rows[3].per_seed_accuracy.iter().zip(&rows[0].per_seed_accuracy).filter(|(t, m)| t >= m).count();
    Ok(AblationReport {
        version: REPORT_VERSION,
        seeds: spec.seeds.clone(),
        params_matched: rows.iter().all(|r| r.adapter_params == rows[0].adapter_params),
        rows,
        teamlora_wins,
    })
}

/// Aligned text rendering of the grid.
pub fn ablation_table(report: &AblationReport) -> String {
    let mark = |on: bool| if on { "yes" } else { "-" };
    let mut out = format!(
        "{:<16} {:<13} {:<11} {:>14} {:>13} {:>9}\n",
        "model", "collaboration", "competition", "adapter_params", "router_params", "mean_acc"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<16} {:<13} {:<11} {:>14} {:>13} {:>9.4}\n",
            r.label,
            mark(r.collaboration),
            mark(r.competition),
            r.adapter_params,
            r.router_params,
            r.mean_accuracy
        ));
    }
    out.push_str(&format!(
        "TeamLoRA >= MoELoRA in {} of {} seeds\n",
        report.teamlora_wins,
        report.seeds.len()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterConfig;

    #[test]
    fn baseline_cell_is_moelora() {
        let base = AdapterSpec::new(AdapterKind::TeamLora, 4, 2, 4.0);
        let cfg = cell_spec(false, false, &base).config_for(10, 6, 3);
        assert_eq!(cfg, AdapterConfig::moelora(10, 6, 4, 2, 4.0, 3));
        let cfg = cell_spec(true, true, &base).config_for(10, 6, 3);
        assert_eq!(cfg, AdapterConfig::teamlora(10, 6, 4, 2, 4.0, 3));
    }
}
