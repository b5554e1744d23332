//! Experiment configuration. Every key is optional; omitted keys take the
//! defaults below, which are also spelled out in `configs/default.toml`.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use teamlora::{AdapterConfig, AdapterKind, AdapterSpec, DatasetSpec, LossKind, OptimizerKind, RouterKind, TaskMode, TrainConfig};

pub const CONFIG_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives adapter initialization, batch order and Monte-Carlo sampling.
    /// The host and the dataset have their own seeds so that they stay fixed
    /// when this one varies. Default 0.
    pub seed: u64,
    /// Default `runs/default`.
    pub out_dir: PathBuf,
    pub host: HostConfig,
    pub dataset: DatasetConfig,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub analysis: AnalysisConfig,
    pub ablation: AblationConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            host: HostConfig::default(),
            dataset: DatasetConfig::default(),
            adapter: AdapterSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisConfig::default(),
            ablation: AblationConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    /// Layer widths, input first. The input width must be
    /// `dataset.n_tasks + dataset.feature_dim` and the output width
    /// `dataset.output_dim`. Default `[36, 64, 8]`.
    pub dims: Vec<usize>,
    /// Default 0.
    pub seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self { dims: vec![36, 64, 8], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Default 4.
    pub n_tasks: usize,
    /// Samples per task in each split. Default 1024.
    pub n_per_task: usize,
    /// Default 32.
    pub feature_dim: usize,
    /// Classes, or target width in regression mode. Default 8.
    pub output_dim: usize,
    /// `classification` (default) or `regression`.
    pub mode: TaskMode,
    /// Default 0.
    pub noise_std: f64,
    /// Default 0.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_tasks: 4, n_per_task: 1024, feature_dim: 32, output_dim: 8, mode: TaskMode::Classification, noise_std: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    /// `lora`, `moelora` or `teamlora` (default).
    pub kind: AdapterKind,
    /// Experts. Ignored for LoRA. Default 4.
    pub k: usize,
    /// Rank of each expert. Default 4.
    pub r_b: usize,
    /// Default 8.
    pub alpha: f64,
    /// `linear-softmax` or `shapley-interaction`; the kind's own router when
    /// omitted.
    pub router: Option<RouterKind>,
    /// Hidden width of the Shapley router MLP; `2k` when omitted.
    pub s_hidden: Option<usize>,
    /// Host layers that get an adapter; all when omitted.
    pub layers: Option<Vec<usize>>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self { kind: AdapterKind::TeamLora, k: 4, r_b: 4, alpha: 8.0, router: None, s_hidden: None, layers: None }
    }
}

impl AdapterSection {
    pub fn spec(&self) -> AdapterSpec {
        AdapterSpec {
            kind: self.kind,
            k: self.k,
            r_b: self.r_b,
            alpha: self.alpha,
            router: self.router,
            s_hidden: self.s_hidden,
            layers: self.layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Default 0.01.
    pub lr: f64,
    /// Default 1000.
    pub steps: u64,
    /// Default 32.
    pub batch_size: usize,
    /// `{ name = "adam" }` (default, betas 0.9/0.999, eps 1e-8) or
    /// `{ name = "sgd" }`.
    pub optimizer: OptimizerKind,
    /// Metrics row interval. Default 100.
    pub eval_every: u64,
    /// Write real `wall_time_ms` values instead of 0. Default false, which
    /// keeps metrics.csv byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { lr: 0.01, steps: 1000, batch_size: 32, optimizer: OptimizerKind::default(), eval_every: 100, record_wall_time: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Rescale the kept expert's weight to 1 in solo and top-1 scoring.
    /// Default false.
    pub renormalize_solo: bool,
    /// Monte-Carlo samples per expert for Shapley estimates; 0 (default)
    /// skips them. At least 100 otherwise.
    pub shapley_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Seeds `seed, seed + 1, ...`. Default 10.
    pub seeds: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Square adapter width. Default 512.
    pub dim: usize,
    /// Default 64.
    pub batch: usize,
    /// Timed rounds after warmup, at least 30. Default 100.
    pub trials: usize,
    /// Expert counts. Default `[1, 2, 4, 8]`.
    pub ks: Vec<usize>,
    /// Default 8.
    pub r_b: usize,
    /// Default 16.
    pub alpha: f64,
    /// Measure wall-clock time; counts only when false. Default true.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { dim: 512, batch: 64, trials: 100, ks: vec![1, 2, 4, 8], r_b: 8, alpha: 16.0, timing: true }
    }
}

impl BenchConfig {
    /// LoRA, then MoELoRA and TeamLoRA for each `k`.
    pub fn configs(&self, seed: u64) -> Vec<AdapterConfig> {
        let d = self.dim;
        let mut out = vec![AdapterConfig::lora(d, d, self.r_b, self.alpha, seed)];
        for &k in &self.ks {
            out.push(AdapterConfig::moelora(d, d, k, self.r_b, self.alpha, seed));
            out.push(AdapterConfig::teamlora(d, d, k, self.r_b, self.alpha, seed));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Rows of the random input. Default 4.
    pub batch: usize,
    /// Maximum relative error. Default 1e-5.
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { batch: 4, tol: teamlora::diffkit::DEFAULT_TOL }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str::<Self>(text).context("invalid config")?.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.n_tasks == 0 {
            bail!("dataset.n_tasks must be at least 1");
        }
        if d.n_per_task == 0 {
            bail!("dataset.n_per_task must be at least 1");
        }
        if d.feature_dim == 0 {
            bail!("dataset.feature_dim must be positive");
        }
        if d.output_dim == 0 {
            bail!("dataset.output_dim must be positive");
        }
        if !(d.noise_std >= 0.0) {
            bail!("dataset.noise_std must be non-negative");
        }
        let dims = &self.host.dims;
        if dims.len() < 2 || dims.contains(&0) {
            bail!("host.dims needs at least two positive widths, got {dims:?}");
        }
        if dims[0] != d.n_tasks + d.feature_dim {
            bail!("host.dims[0] must equal dataset.n_tasks + dataset.feature_dim = {}, got {}", d.n_tasks + d.feature_dim, dims[0]);
        }
        if dims[dims.len() - 1] != d.output_dim {
            bail!("host.dims last entry must equal dataset.output_dim = {}, got {}", d.output_dim, dims[dims.len() - 1]);
        }
        let a = &self.adapter;
        if a.k == 0 {
            bail!("adapter.k must be at least 1");
        }
        if a.r_b == 0 {
            bail!("adapter.r_b must be at least 1");
        }
        if !a.alpha.is_finite() {
            bail!("adapter.alpha must be finite");
        }
        if let Some(layers) = &a.layers {
            if let Some(l) = layers.iter().find(|&&l| l + 1 >= dims.len()) {
                bail!("adapter.layers: host has {} layers, got index {l}", dims.len() - 1);
            }
        }
        for (i, w) in dims.windows(2).enumerate() {
            if a.layers.as_ref().is_none_or(|ls| ls.contains(&i)) {
                a.spec().config_for(w[0], w[1], 0).validate().with_context(|| format!("adapter: invalid for host layer {i}"))?;
            }
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            bail!("train.lr must be finite and non-negative");
        }
        if t.batch_size == 0 {
            bail!("train.batch_size must be at least 1");
        }
        if t.batch_size > d.n_per_task * d.n_tasks {
            bail!("train.batch_size {} exceeds the {} training samples", t.batch_size, d.n_per_task * d.n_tasks);
        }
        if t.eval_every == 0 {
            bail!("train.eval_every must be at least 1");
        }
        if self.analysis.shapley_samples != 0 && self.analysis.shapley_samples < 100 {
            bail!("analysis.shapley_samples must be 0 or at least 100");
        }
        if self.ablation.seeds == 0 {
            bail!("ablation.seeds must be at least 1");
        }
        let b = &self.bench;
        if b.dim == 0 || b.batch == 0 || b.r_b == 0 {
            bail!("bench.dim, bench.batch and bench.r_b must be positive");
        }
        if b.trials < 30 {
            bail!("bench.trials must be at least 30, got {}", b.trials);
        }
        if b.ks.contains(&0) {
            bail!("bench.ks entries must be at least 1");
        }
        if self.gradcheck.batch == 0 {
            bail!("gradcheck.batch must be at least 1");
        }
        if !(self.gradcheck.tol > 0.0) {
            bail!("gradcheck.tol must be positive");
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            n_tasks: d.n_tasks,
            n_per_task: d.n_per_task,
            feature_dim: d.feature_dim,
            output_dim: d.output_dim,
            mode: d.mode,
            noise_std: d.noise_std,
            seed: d.seed,
        }
    }

    pub fn loss(&self) -> LossKind {
        LossKind::for_mode(self.dataset.mode)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            steps: t.steps,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            loss: self.loss(),
            seed: self.seed,
            eval_every: t.eval_every,
            record_wall_time: t.record_wall_time,
        }
    }
}
