//! Diagnostics run on adapters and trained hosts: operation counts and
//! latency, expert load, top-1 redundancy, Monte-Carlo Shapley estimates and
//! the collaboration × competition ablation grid.
//!
//! Every report carries a `version` field and serializes to JSON.

mod ablation;
mod cost;
mod load;
mod retention;
mod shapley;

pub use ablation::{ablation_grid, ablation_table, cell_spec, AblationCell, AblationReport, AblationSpec};
pub use cost::{cost_report, latency_bench, median, CostEntry, CostReport, Timing, TimingEntry};
pub use load::{entropy, expert_utilization, LayerLoad, LoadReport};
pub use retention::{top1_retention, RetentionReport, Score};
pub use shapley::{payoff, sample_profile, shapley_fixture, shapley_mc, ShapleyEstimate};

use crate::error::{Error, Result};
use crate::host::FrozenHost;

pub const REPORT_VERSION: u64 = 1;

/// Expert count shared by every routed adapter, or `None` when no adapter
/// has a router. Participation overrides index experts across all routed
/// adapters at once, so mixed `k` is rejected.
pub(crate) fn routed_experts(host: &FrozenHost) -> Result<Option<usize>> {
    let mut k = None;
    for (l, a) in host.adapters().filter(|(_, a)| a.router.is_some()) {
        match k {
            None => k = Some(a.experts()),
            Some(k0) if k0 != a.experts() => {
                return Err(Error::InvalidConfig(format!(
                    "routed adapters disagree on k: {k0} vs {} at layer {l}",
                    a.experts()
                )))
            }
            _ => {}
        }
    }
    Ok(k)
}
