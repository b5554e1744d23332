//! Synthetic multi-task data.
//!
//! Each task owns a frozen random linear teacher over a shared feature space.
//! Inputs are `[one-hot task tag | standard-normal features]`; classification
//! targets are the teacher's argmax, regression targets its scaled output plus
//! Gaussian noise. Teachers are regenerated from `(seed, task_id)` so a saved
//! dataset only stores samples.
//!
//! File format: one JSON header line
//! `{"version":1,"n_tasks":T,"dims":[input_dim,output_dim],"mode":...}`
//! followed by one `{"x":[...],"y":...,"task_id":t}` record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::argmax;
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, OpCounter};

pub const DATASET_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
    pub task_id: usize,
}

/// Generation parameters. `input_dim = n_tasks + feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_tasks: usize,
    pub n_per_task: usize,
    pub feature_dim: usize,
    /// Number of classes, or target width for regression.
    pub output_dim: usize,
    #[serde(default)]
    pub mode: TaskMode,
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Four 8-class tasks with `feature_dim = input_dim − 4`.
    pub fn default_suite(input_dim: usize, n_per_task: usize, seed: u64) -> Self {
        Self {
            n_tasks: 4,
            n_per_task,
            feature_dim: input_dim.saturating_sub(4),
            output_dim: 8,
            mode: TaskMode::Classification,
            noise_std: 0.0,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_tasks + self.feature_dim
    }

    fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::InvalidConfig("n_tasks must be at least 1".into()));
        }
        if self.n_per_task == 0 {
            return Err(Error::InvalidConfig("n_per_task must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim and output_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// A task's frozen teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub teacher: Matrix,
    pub noise_std: f64,
}

impl TaskSpec {
    pub fn new(task_id: usize, spec: &DatasetSpec) -> Self {
        let mut rng = crate::rng::stream(spec.seed, "teacher", task_id as u64);
        Self {
            task_id,
            teacher: Matrix::randn(spec.feature_dim, spec.output_dim, 1.0, &mut rng),
            noise_std: spec.noise_std,
        }
    }

    /// Teacher scores for a batch of feature rows, scaled by `1/√feature_dim`.
    pub fn scores(&self, features: &Matrix) -> Result<Matrix> {
        let s = 1.0 / (self.teacher.rows() as f64).sqrt();
        Ok(matmul(features, &self.teacher, &mut OpCounter::new())?.scale(s))
    }

    pub fn label(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(self.scores(&Matrix::row_vector(features))?.row(0)))
    }

    pub fn checksum(&self) -> u64 {
        self.teacher.as_slice().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u64,
    pub n_tasks: usize,
    /// `[input_dim, output_dim]`
    pub dims: [usize; 2],
    pub mode: TaskMode,
    pub split: Split,
    pub n_per_task: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_tasks: self.n_tasks,
            n_per_task: self.n_per_task,
            feature_dim: self.dims[0] - self.n_tasks,
            output_dim: self.dims[1],
            mode: self.mode,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
    teachers: Vec<TaskSpec>,
}

impl Dataset {
    pub fn n_tasks(&self) -> usize {
        self.header.n_tasks
    }

    pub fn input_dim(&self) -> usize {
        self.header.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.header.dims[1]
    }

    pub fn mode(&self) -> TaskMode {
        self.header.mode
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn teachers(&self) -> &[TaskSpec] {
        &self.teachers
    }

    /// Stack the given samples into an input matrix plus their targets.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<&Target>) {
        let d = self.input_dim();
        let mut x = Matrix::zeros(indices.len(), d);
        let mut y = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&self.samples[i].x);
            y.push(&self.samples[i].y);
        }
        (x, y)
    }

    pub fn task_indices(&self, task: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].task_id == task).collect()
    }

    /// Feature slice (without the task tag) of a sample.
    pub fn features<'a>(&self, sample: &'a Sample) -> &'a [f64] {
        &sample.x[self.header.n_tasks..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_dataset(self, path)
    }
}

/// Generate one split. Train and eval share teachers but draw features from
/// independent streams.
pub fn gen_multitask(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let teachers: Vec<TaskSpec> = (0..spec.n_tasks).map(|t| TaskSpec::new(t, spec)).collect();
    let mut samples = Vec::with_capacity(spec.n_tasks * spec.n_per_task);
    for teacher in &teachers {
        let t = teacher.task_id as u64;
        let mut feat_rng = crate::rng::stream(spec.seed, &format!("features-{}", split.label()), t);
        let mut noise_rng = crate::rng::stream(spec.seed, &format!("noise-{}", split.label()), t);
        let features = Matrix::randn(spec.n_per_task, spec.feature_dim, 1.0, &mut feat_rng);
        let scores = teacher.scores(&features)?;
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for n in 0..spec.n_per_task {
            let mut x = vec![0.0; spec.n_tasks];
            x[teacher.task_id] = 1.0;
            x.extend_from_slice(features.row(n));
            let y = match spec.mode {
                TaskMode::Classification => Target::Class(argmax(scores.row(n))),
                TaskMode::Regression => {
                    Target::Vector(scores.row(n).iter().map(|v| v + noise.sample(&mut noise_rng)).collect())
                }
            };
            samples.push(Sample { x, y, task_id: teacher.task_id });
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            n_tasks: spec.n_tasks,
            dims: [spec.input_dim(), spec.output_dim],
            mode: spec.mode,
            split,
            n_per_task: spec.n_per_task,
            noise_std: spec.noise_std,
            seed: spec.seed,
        },
        samples,
        teachers,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ds.header)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a dataset, validating every record. Record 0 is the header.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let parse_err = |record: usize, message: String| Error::Parse { record, message };

    let header_line = lines.next().ok_or_else(|| parse_err(0, "missing header".into()))??;
    let raw: serde_json::Value = serde_json::from_str(&header_line).map_err(|e| parse_err(0, e.to_string()))?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64).ok_or_else(|| parse_err(0, "missing version".into()))?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: DATASET_VERSION });
    }
    let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| parse_err(0, e.to_string()))?;
    if header.dims[0] <= header.n_tasks {
        return Err(parse_err(0, "input dim must exceed n_tasks".into()));
    }

    let expected = header.n_tasks * header.n_per_task;
    let mut samples = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let record = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| parse_err(record, e.to_string()))?;
        if s.x.len() != header.dims[0] || s.task_id >= header.n_tasks {
            return Err(parse_err(record, "sample does not match header dims".into()));
        }
        match (&s.y, header.mode) {
            (Target::Class(c), TaskMode::Classification) if *c < header.dims[1] => {}
            (Target::Vector(v), TaskMode::Regression) if v.len() == header.dims[1] => {}
            _ => return Err(parse_err(record, "target does not match header mode".into())),
        }
        samples.push(s);
    }
    if samples.len() != expected {
        return Err(parse_err(
            samples.len() + 1,
            format!("expected {expected} records, found {}", samples.len()),
        ));
    }
    let spec = header.spec();
    let teachers = (0..header.n_tasks).map(|t| TaskSpec::new(t, &spec)).collect();
    Ok(Dataset { header, samples, teachers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> DatasetSpec {
        DatasetSpec { n_tasks: 4, n_per_task: 256, feature_dim: 6, output_dim: 8, mode: TaskMode::Classification, noise_std: 0.0, seed }
    }

    #[test]
    fn sizes_and_determinism() {
        let a = gen_multitask(&spec(1), Split::Train).unwrap();
        let b = gen_multitask(&spec(1), Split::Train).unwrap();
        assert_eq!(a.len(), 1024);
        for t in 0..4 {
            assert_eq!(a.task_indices(t).len(), 256);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn task_tag_matches_task_id() {
        let ds = gen_multitask(&spec(2), Split::Eval).unwrap();
        for s in &ds.samples {
            let tag: Vec<f64> = (0..4).map(|t| if t == s.task_id { 1.0 } else { 0.0 }).collect();
            assert_eq!(&s.x[..4], tag.as_slice());
        }
    }

    #[test]
    fn stored_labels_are_reproduced_by_teacher() {
        let ds = gen_multitask(&spec(3), Split::Train).unwrap();
        for s in &ds.samples {
            let label = ds.teachers()[s.task_id].label(ds.features(s)).unwrap();
            assert_eq!(Target::Class(label), s.y);
        }
    }

    #[test]
    fn train_and_eval_differ() {
        let tr = gen_multitask(&spec(4), Split::Train).unwrap();
        let ev = gen_multitask(&spec(4), Split::Eval).unwrap();
        assert_ne!(tr.samples[0].x, ev.samples[0].x);
        assert_eq!(tr.teachers(), ev.teachers());
    }

    #[test]
    fn teachers_are_pairwise_distinct() {
        let ds = gen_multitask(&spec(5), Split::Train).unwrap();
        let sums: Vec<u64> = ds.teachers().iter().map(TaskSpec::checksum).collect();
        for i in 0..sums.len() {
            for j in i + 1..sums.len() {
                assert_ne!(sums[i], sums[j]);
            }
        }
    }

    #[test]
    fn zero_per_task_is_rejected() {
        let mut s = spec(0);
        s.n_per_task = 0;
        assert!(matches!(gen_multitask(&s, Split::Train), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn regression_targets_have_output_width() {
        let mut s = spec(6);
        s.mode = TaskMode::Regression;
        s.noise_std = 0.1;
        let ds = gen_multitask(&s, Split::Train).unwrap();
        assert!(matches!(&ds.samples[0].y, Target::Vector(v) if v.len() == 8));
    }
}
