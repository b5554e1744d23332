use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use teamlora::analysis::{
    ablation_grid, ablation_table, cost_report, expert_utilization, latency_bench, shapley_mc, top1_retention, AblationSpec,
    LoadReport, RetentionReport, ShapleyEstimate, REPORT_VERSION,
};
use teamlora::diffkit::{check_adapter, default_suite, GradCheckReport};
use teamlora::tasks::{gen_multitask, Split};
use teamlora::train::{evaluate, load_checkpoint, metrics_csv, EvalReport, Trainer};
use teamlora::{AdapterConfig, Dataset, FrozenHost, Participation};

use crate::config::{ExperimentConfig, CONFIG_VERSION};

/// Files a command produces, held in memory until the command has finished
/// so that a failure leaves nothing behind.
pub struct Output {
    pub artifacts: Vec<(String, Vec<u8>)>,
    /// Every check the command makes passed.
    pub pass: bool,
    pub summary: Vec<String>,
}

impl Output {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut out = Self { artifacts: Vec::new(), pass: true, summary: Vec::new() };
        out.json("resolved-config.json", &ResolvedConfig { version: CONFIG_VERSION, config: cfg })?;
        Ok(out)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.artifacts.push((name.to_string(), bytes));
        Ok(())
    }

    fn text(&mut self, name: &str, text: String) {
        self.artifacts.push((name.to_string(), text.into_bytes()));
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.pass = false;
            self.summary.push(format!("check failed: {}", what.into()));
        }
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    version: u64,
    #[serde(flatten)]
    config: &'a ExperimentConfig,
}

fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let spec = cfg.dataset_spec();
    Ok((gen_multitask(&spec, Split::Train)?, gen_multitask(&spec, Split::Eval)?))
}

fn build_host(cfg: &ExperimentConfig) -> Result<FrozenHost> {
    let mut host = FrozenHost::build(&cfg.host.dims, cfg.host.seed)?;
    cfg.adapter.spec().attach(&mut host, cfg.seed)?;
    Ok(host)
}

/// Train per the config. Returns the host, its trainer, the metrics CSV and
/// the frozen checksum taken before training.
fn run_training(cfg: &ExperimentConfig, train_ds: &Dataset, eval_ds: &Dataset) -> Result<(FrozenHost, Trainer, String, String)> {
    let mut host = build_host(cfg)?;
    let before = host.frozen_checksum();
    let mut trainer = Trainer::new(cfg.train_config())?;
    let history = trainer.run(&mut host, train_ds, Some(eval_ds), cfg.train.steps)?;
    Ok((host, trainer, metrics_csv(&history, cfg.dataset.n_tasks), before))
}

pub fn train(cfg: &ExperimentConfig) -> Result<Output> {
    let mut out = Output::new(cfg)?;
    let (tr, ev) = datasets(cfg)?;
    let (host, trainer, csv, before) = run_training(cfg, &tr, &ev)?;
    let after = host.frozen_checksum();
    out.check(before == after, format!("frozen weights changed: {before} -> {after}"));
    out.check(csv.lines().count() >= 2, "no metrics rows were recorded");
    let final_eval = evaluate(&host, &ev, cfg.loss(), &Participation::Routed)?;
    out.check(final_eval.mean_loss.is_finite(), "eval loss is not finite");
    out.summary.push(format!(
        "trained {} steps, {} trainable parameters, eval accuracy {:.4}, frozen checksum {after}",
        trainer.step_count(),
        host.trainable_count(),
        final_eval.mean_accuracy
    ));
    out.text("metrics.csv", csv);
    out.json("checkpoint.json", &trainer.checkpoint(&host))?;
    Ok(out)
}

pub fn bench(cfg: &ExperimentConfig) -> Result<Output> {
    let mut out = Output::new(cfg)?;
    let b = &cfg.bench;
    let configs = b.configs(cfg.seed);
    let report = if b.timing { latency_bench(&configs, b.batch, b.trials, cfg.seed)? } else { cost_report(&configs, b.batch, cfg.seed)? };
    out.check(report.counts_match, "measured matmul counts differ from predictions");
    for e in &report.entries {
        out.summary.push(format!("{:<22} branch matmuls {:>3} router matmuls {}", e.label, e.measured.branch_matmuls, e.measured.router_matmuls));
    }
    if let Some(t) = &report.timing {
        for e in t.entries.iter().filter(|e| e.forward_ratio_vs_moelora.is_some() && e.label.starts_with("TeamLoRA")) {
            out.summary.push(format!(
                "{:<22} forward {:.3} train step {:.3} of MoELoRA",
                e.label,
                e.forward_ratio_vs_moelora.unwrap_or(f64::NAN),
                e.train_ratio_vs_moelora.unwrap_or(f64::NAN)
            ));
        }
    }
    out.json("cost_report.json", &report)?;
    Ok(out)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<Output> {
    let mut out = Output::new(cfg)?;
    let (tr, ev) = datasets(cfg)?;
    let spec = AblationSpec {
        host_dims: cfg.host.dims.clone(),
        host_seed: cfg.host.seed,
        adapter: cfg.adapter.spec(),
        train: cfg.train_config(),
        seeds: (0..cfg.ablation.seeds).map(|i| cfg.seed + i).collect(),
    };
    let report = ablation_grid(&tr, &ev, &spec)?;
    out.check(report.params_matched, "cells have different adapter parameter counts");
    let table = ablation_table(&report);
    out.summary.extend(table.lines().map(str::to_string));
    out.json("ablation.json", &report)?;
    out.text("ablation.txt", table);
    Ok(out)
}

#[derive(Serialize)]
struct ShapleyReport {
    version: u64,
    n_samples: usize,
    estimates: Vec<ShapleyEstimate>,
}

/// A trained host: restored from `checkpoint` when given, otherwise trained
/// from the config.
fn trained_host(cfg: &ExperimentConfig, checkpoint: Option<&Path>, tr: &Dataset, ev: &Dataset) -> Result<(FrozenHost, u64)> {
    match checkpoint {
        Some(path) => {
            let mut host = build_host(cfg)?;
            let trainer = load_checkpoint(path, &mut host).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            Ok((host, trainer.step_count()))
        }
        None => {
            let (host, trainer, _, _) = run_training(cfg, tr, ev)?;
            Ok((host, trainer.step_count()))
        }
    }
}

fn check_load(out: &mut Output, report: &LoadReport) {
    for layer in &report.layers {
        let bounded = |h: &f64| (0.0..=layer.max_entropy).contains(h);
        out.check(layer.entropy.iter().all(bounded), format!("layer {} entropy outside [0, ln k]", layer.layer));
        out.check(layer.argmax_entropy.iter().all(bounded), format!("layer {} argmax entropy outside [0, ln k]", layer.layer));
        if layer.k == 1 {
            out.check(layer.entropy.iter().all(|&h| h == 0.0), format!("layer {} single expert with nonzero entropy", layer.layer));
        }
        if layer.router == Some(teamlora::RouterKind::LinearSoftmax) {
            let sums_ok = layer.omega_row_sums.iter().all(|s| (s - 1.0).abs() <= 1e-9);
            out.check(sums_ok, format!("layer {} softmax weights do not sum to 1", layer.layer));
        }
    }
}

fn check_retention(out: &mut Output, report: &RetentionReport) {
    out.check(report.solo.len() == report.k, "retention report has the wrong number of solo scores");
    let finite = |s: &teamlora::analysis::Score| s.loss.is_finite() && (0.0..=1.0).contains(&s.accuracy);
    out.check(report.solo.iter().all(finite) && finite(&report.all) && finite(&report.top1), "retention scores out of range");
}

pub fn analyze(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Output> {
    let mut out = Output::new(cfg)?;
    let (tr, ev) = datasets(cfg)?;
    let (host, steps) = trained_host(cfg, checkpoint, &tr, &ev)?;
    let load = expert_utilization(&host, &ev)?;
    check_load(&mut out, &load);
    let retention = top1_retention(&host, &ev, cfg.loss(), cfg.analysis.renormalize_solo)?;
    check_retention(&mut out, &retention);
    for layer in &load.layers {
        let h: Vec<String> = layer.entropy.iter().map(|h| format!("{h:.3}")).collect();
        out.summary.push(format!("layer {} {}: entropy per task [{}] of max {:.3}", layer.layer, layer.label, h.join(", "), layer.max_entropy));
    }
    out.summary.push(format!(
        "after {steps} steps: all experts {:.4}, top-1 {:.4}, retention {}",
        retention.all.accuracy,
        retention.top1.accuracy,
        retention.retention_ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"))
    ));
    out.json("load_report.json", &load)?;
    out.json("retention_report.json", &retention)?;
    if cfg.analysis.shapley_samples > 0 {
        let k = retention.k;
        if k < 2 {
            bail!("analysis.shapley_samples needs a routed adapter with k >= 2");
        }
        let estimates = (0..k)
            .map(|e| shapley_mc(&host, &ev, cfg.loss(), e, cfg.analysis.shapley_samples, cfg.seed))
            .collect::<teamlora::Result<Vec<_>>>()?;
        for s in &estimates {
            out.summary.push(format!("expert {} Shapley value {:.6} ± {:.6}", s.expert, s.estimate, s.std_error));
        }
        out.json("shapley.json", &ShapleyReport { version: REPORT_VERSION, n_samples: cfg.analysis.shapley_samples, estimates })?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct GradcheckEntry {
    label: String,
    config: AdapterConfig,
    report: GradCheckReport,
}

#[derive(Serialize)]
struct GradcheckSummary {
    version: u64,
    tolerance: f64,
    batch: usize,
    all_pass: bool,
    configs: Vec<GradcheckEntry>,
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Output> {
    let mut out = Output::new(cfg)?;
    let mut configs = Vec::new();
    for mut config in default_suite() {
        config.seed = config.seed.wrapping_add(cfg.seed);
        let report = check_adapter(&config, cfg.gradcheck.batch, cfg.gradcheck.tol)?;
        out.check(report.pass, format!("{} max relative error {:.3e}", config.label(), report.max_relative_error));
        configs.push(GradcheckEntry { label: config.label(), config, report });
    }
    let worst = configs.iter().map(|c| c.report.max_relative_error).fold(0.0, f64::max);
    out.summary.push(format!(
        "{} of {} configurations pass, worst relative error {worst:.3e}",
        configs.iter().filter(|c| c.report.pass).count(),
        configs.len()
    ));
    let summary = GradcheckSummary { version: REPORT_VERSION, tolerance: cfg.gradcheck.tol, batch: cfg.gradcheck.batch, all_pass: out.pass, configs };
    out.json("gradcheck.json", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct EvalSummary {
    version: u64,
    step: u64,
    frozen_checksum: String,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Output> {
    let mut out = Output::new(cfg)?;
    let spec = cfg.dataset_spec();
    let ev = gen_multitask(&spec, Split::Eval)?;
    let mut host = build_host(cfg)?;
    let trainer = load_checkpoint(checkpoint, &mut host).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let report = evaluate(&host, &ev, cfg.loss(), &Participation::Routed)?;
    out.check(report.mean_loss.is_finite(), "eval loss is not finite");
    for (t, task) in report.tasks.iter().enumerate() {
        out.summary.push(format!("task {t}: loss {:.4} accuracy {:.4}", task.loss, task.accuracy));
    }
    out.summary.push(format!("mean accuracy {:.4} at step {}", report.mean_accuracy, trainer.step_count()));
    out.json("eval.json", &EvalSummary { version: REPORT_VERSION, step: trainer.step_count(), frozen_checksum: host.frozen_checksum(), report })?;
    Ok(out)
}
