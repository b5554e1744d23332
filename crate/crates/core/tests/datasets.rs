use std::fs;

use teamlora::tasks::{gen_multitask, load_dataset, save_dataset, DatasetSpec, Split, Target, TaskSpec};
use teamlora::{Error, Matrix, TaskMode};

fn suite() -> DatasetSpec {
    DatasetSpec::default_suite(20, 256, 9)
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    for mode in [TaskMode::Classification, TaskMode::Regression] {
        let ds = gen_multitask(&DatasetSpec { mode, noise_std: 0.1, ..suite() }, Split::Train).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.header, ds.header);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a, b);
            assert!(a.x.iter().zip(&b.x).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}

#[test]
fn saved_bytes_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
    save_dataset(&gen_multitask(&suite(), Split::Eval).unwrap(), &p1).unwrap();
    save_dataset(&gen_multitask(&suite(), Split::Eval).unwrap(), &p2).unwrap();
    assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
}

#[test]
fn truncated_file_reports_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    save_dataset(&gen_multitask(&suite(), Split::Train).unwrap(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    // Cut in the middle of record 10 (line 11).
    let cut: usize = text.lines().take(10).map(|l| l.len() + 1).sum::<usize>() + 15;
    fs::write(&path, &text[..cut]).unwrap();
    match load_dataset(&path) {
        Err(Error::Parse { record, .. }) => assert_eq!(record, 10),
        other => panic!("expected parse error, got {other:?}"),
    }
    // Dropping whole records is caught by the header count.
    let short: String = text.lines().take(100).map(|l| format!("{l}\n")).collect();
    fs::write(&path, short).unwrap();
    assert!(load_dataset(&path).is_err());
}

#[test]
fn version_mismatch_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    save_dataset(&gen_multitask(&suite(), Split::Train).unwrap(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":2", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::UnsupportedVersion { found: 2, expected: 1 })));
}

/// Standardized deviation of every (task, class) count from its multinomial
/// expectation, with class probabilities estimated from a large independent
/// draw through the same teacher.
fn class_z_scores(spec: &DatasetSpec, probe_n: usize) -> Vec<f64> {
    let ds = gen_multitask(spec, Split::Train).unwrap();
    let c = spec.output_dim;
    let mut out = Vec::new();
    for t in 0..spec.n_tasks {
        let teacher = TaskSpec::new(t, spec);
        let probe = Matrix::randn(probe_n, spec.feature_dim, 1.0, &mut teamlora::rng::stream(12345, "probe", t as u64));
        let mut probe_counts = vec![0usize; c];
        for n in 0..probe_n {
            probe_counts[teacher.label(probe.row(n)).unwrap()] += 1;
        }
        let mut counts = vec![0usize; c];
        for i in ds.task_indices(t) {
            let Target::Class(y) = ds.samples[i].y else { panic!("classification") };
            counts[y] += 1;
        }
        let n = spec.n_per_task as f64;
        for k in 0..c {
            let p = probe_counts[k] as f64 / probe_n as f64;
            out.push((counts[k] as f64 - n * p) / (n * p * (1.0 - p)).sqrt());
        }
    }
    out
}

#[test]
fn class_balance_within_three_sigma() {
    let z = class_z_scores(&DatasetSpec::default_suite(20, 256, 0), 200_000);
    assert_eq!(z.len(), 32);
    for (i, z) in z.iter().enumerate() {
        assert!(z.abs() <= 3.0, "task {} class {}: z = {z:.2}", i / 8, i % 8);
    }
}

/// Across many seeds the deviations behave like standard scores.
#[test]
fn class_counts_are_calibrated_across_seeds() {
    let z: Vec<f64> = (0..20).flat_map(|s| class_z_scores(&DatasetSpec::default_suite(20, 256, s), 50_000)).collect();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / n;
    assert!(mean.abs() < 0.1, "mean z {mean}");
    assert!((0.8..1.2).contains(&mean_sq), "mean z² {mean_sq}");
    assert!(z.iter().filter(|v| v.abs() > 3.0).count() as f64 / n < 0.02);
}
