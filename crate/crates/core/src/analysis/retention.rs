use serde::{Deserialize, Serialize};

use super::{routed_experts, REPORT_VERSION};
use crate::adapters::Participation;
use crate::error::Result;
use crate::host::FrozenHost;
use crate::tasks::Dataset;
use crate::train::{evaluate, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Mean per-task accuracy.
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub version: u64,
    pub k: usize,
    pub renormalize: bool,
    pub solo: Vec<Score>,
    pub top1: Score,
    pub all: Score,
    /// `top1.accuracy / all.accuracy`, absent when the latter is 0.
    pub retention_ratio: Option<f64>,
}

fn score(host: &FrozenHost, ds: &Dataset, loss: LossKind, p: &Participation) -> Result<Score> {
    let r = evaluate(host, ds, loss, p)?;
    Ok(Score { accuracy: r.mean_accuracy, loss: r.mean_loss })
}

/// Solo, top-1 and all-experts scores. Overrides apply to every routed
/// adapter; with `renormalize` the kept weight is set to 1.
pub fn top1_retention(host: &FrozenHost, ds: &Dataset, loss: LossKind, renormalize: bool) -> Result<RetentionReport> {
    let all = score(host, ds, loss, &Participation::Routed)?;
    let k = routed_experts(host)?.unwrap_or(1);
    let (solo, top1) = if routed_experts(host)?.is_none() {
        (vec![all], all)
    } else {
        let solo = (0..k)
            .map(|expert| score(host, ds, loss, &Participation::Solo { expert, renormalize }))
            .collect::<Result<Vec<_>>>()?;
        (solo, score(host, ds, loss, &Participation::Top1 { renormalize })?)
    };
    Ok(RetentionReport {
        version: REPORT_VERSION,
        k,
        renormalize,
        solo,
        top1,
        all,
        retention_ratio: (all.accuracy > 0.0).then(|| top1.accuracy / all.accuracy),
    })
}
