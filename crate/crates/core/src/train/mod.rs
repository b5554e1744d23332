//! Adapter-only fine-tuning: losses, evaluation and the training loop.
//!
//! Only adapter parameters are handed to the optimizer; the host's frozen
//! weights are never touched, which the checksum tests assert.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerKind};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{argmax, Participation};
use crate::error::{Error, Result};
use crate::host::{FrozenHost, HostGrads};
use crate::linalg::{Matrix, OpCounter};
use crate::tasks::{Dataset, Target, TaskMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn for_mode(mode: TaskMode) -> Self {
        match mode {
            TaskMode::Classification => LossKind::CrossEntropy,
            TaskMode::Regression => LossKind::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    pub eval_every: u64,
    /// When false the `wall_time_ms` metric is written as 0 so that metric
    /// files are byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 300,
            batch_size: 32,
            optimizer: OptimizerKind::default(),
            loss: LossKind::CrossEntropy,
            seed: 0,
            eval_every: 50,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("train.lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("train.eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub tasks: Vec<TaskEval>,
    pub wall_time_ms: f64,
}

/// Loss value and its gradient with respect to the network output.
pub fn loss_and_output_grad(output: &Matrix, targets: &[&Target], kind: LossKind) -> Result<(f64, Matrix)> {
    let n = output.rows();
    if n == 0 || targets.len() != n {
        return Err(Error::InvalidConfig(format!("batch of {} targets for {n} outputs", targets.len())));
    }
    let c = output.cols();
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    match kind {
        LossKind::CrossEntropy => {
            for (i, t) in targets.iter().enumerate() {
                let &Target::Class(y) = *t else {
                    return Err(Error::InvalidConfig("cross-entropy needs class targets".into()));
                };
                if y >= c {
                    return Err(Error::LabelOutOfRange { label: y, classes: c });
                }
                let row = output.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                // Running mean: a batch of identical losses averages to exactly that loss.
                total += (lse - row[y] - total) / (i + 1) as f64;
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let p = (row[j] - lse).exp();
                    *g = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            Ok((total, grad))
        }
        LossKind::Mse => {
            let denom = (n * c) as f64;
            for (i, t) in targets.iter().enumerate() {
                let Target::Vector(y) = *t else {
                    return Err(Error::InvalidConfig("mse needs vector targets".into()));
                };
                if y.len() != c {
                    return Err(Error::shape("mse target", (1, y.len()), (1, c)));
                }
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let d = output.get(i, j) - y[j];
                    total += d * d;
                    *g = 2.0 * d / denom;
                }
            }
            Ok((total / denom, grad))
        }
    }
}

/// Forward, loss and adapter gradients for one batch.
pub fn loss_and_grad(
    host: &FrozenHost,
    x: &Matrix,
    targets: &[&Target],
    kind: LossKind,
    counter: &mut OpCounter,
) -> Result<(f64, HostGrads)> {
    let (out, trace) = host.forward(x, counter)?;
    let (loss, g) = loss_and_output_grad(&out, targets, kind)?;
    let grads = host.backward(&trace, &g, counter)?;
    Ok((loss, grads))
}

fn correct(output: &[f64], target: &Target) -> bool {
    match target {
        Target::Class(y) => argmax(output) == *y,
        Target::Vector(v) => argmax(output) == argmax(v),
    }
}

/// Per-task loss and accuracy. Regression accuracy is argmax agreement.
pub fn evaluate(host: &FrozenHost, ds: &Dataset, kind: LossKind, participation: &Participation) -> Result<EvalReport> {
    let mut tasks = Vec::with_capacity(ds.n_tasks());
    for t in 0..ds.n_tasks() {
        let idx = ds.task_indices(t);
        let (x, y) = ds.batch(&idx);
        let (out, _) = host.forward_with(&x, participation, &mut OpCounter::new())?;
        let (loss, _) = loss_and_output_grad(&out, &y, kind)?;
        let hits = y.iter().enumerate().filter(|(i, t)| correct(out.row(*i), t)).count();
        tasks.push(TaskEval { loss, accuracy: hits as f64 / idx.len() as f64 });
    }
    let nt = tasks.len() as f64;
    Ok(EvalReport {
        mean_loss: tasks.iter().map(|t| t.loss).sum::<f64>() / nt,
        mean_accuracy: tasks.iter().map(|t| t.accuracy).sum::<f64>() / nt,
        tasks,
    })
}

/// Training state that survives checkpointing: optimizer moments, the shuffle
/// stream, the current epoch order and the loss window.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
    window_loss: f64,
    window_steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer),
            rng: crate::rng::stream(config.seed, "shuffle", 0),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            window_loss: 0.0,
            window_steps: 0,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let bs = self.config.batch_size.min(n);
        if self.order.len() != n || self.cursor + bs > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + bs].to_vec();
        self.cursor += bs;
        batch
    }

    /// One optimizer step on the next shuffled batch. Returns the batch loss.
    pub fn step(&mut self, host: &mut FrozenHost, train: &Dataset) -> Result<f64> {
        if host.adapters().next().is_none() {
            return Err(Error::InvalidConfig("no adapters attached".into()));
        }
        let idx = self.next_batch(train.len());
        let (x, y) = train.batch(&idx);
        let (loss, grads) = loss_and_grad(host, &x, &y, self.config.loss, &mut OpCounter::new())?;
        self.optimizer.step(host.trainable_params_mut(), &grads.flatten(), self.config.lr)?;
        self.step += 1;
        self.window_loss += loss;
        self.window_steps += 1;
        Ok(loss)
    }

    /// Run `steps` more steps, recording metrics every `eval_every` steps and
    /// at step `config.steps`. Evaluation uses `eval`, or `train` when absent.
    pub fn run(&mut self, host: &mut FrozenHost, train: &Dataset, eval: Option<&Dataset>, steps: u64) -> Result<Vec<Metrics>> {
        let start = Instant::now();
        let end = self.step + steps;
        let mut history = Vec::new();
        while self.step < end {
            self.step(host, train)?;
            if self.step % self.config.eval_every == 0 || self.step == self.config.steps {
                let report = evaluate(host, eval.unwrap_or(train), self.config.loss, &Participation::Routed)?;
                let train_loss = self.window_loss / self.window_steps as f64;
                self.window_loss = 0.0;
                self.window_steps = 0;
                let wall_time_ms = if self.config.record_wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
                history.push(Metrics { step: self.step, train_loss, tasks: report.tasks, wall_time_ms });
            }
        }
        Ok(history)
    }
}

/// Train `host`'s adapters for `config.steps` steps.
pub fn train(host: &mut FrozenHost, train: &Dataset, eval: Option<&Dataset>, config: &TrainConfig) -> Result<Vec<Metrics>> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(host, train, eval, config.steps)
}

/// Metrics as CSV: `step,train_loss,task0_acc,...,wall_time_ms`.
pub fn metrics_csv(history: &[Metrics], n_tasks: usize) -> String {
    let mut out = String::from("step,train_loss");
    for t in 0..n_tasks {
        out.push_str(&format!(",task{t}_acc"));
    }
    out.push_str(",wall_time_ms\n");
    for m in history {
        out.push_str(&format!("{},{}", m.step, m.train_loss));
        for t in &m.tasks {
            out.push_str(&format!(",{}", t.accuracy));
        }
        out.push_str(&format!(",{}\n", m.wall_time_ms));
    }
    out
}
