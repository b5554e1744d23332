use std::fs;

use teamlora::tasks::{gen_multitask, Dataset, Split};
use teamlora::train::{load_checkpoint, metrics_csv, save_checkpoint, train, Trainer};
use teamlora::{AdapterConfig, AdapterKind, AdapterSpec, DatasetSpec, Error, FrozenHost, TaskMode, TrainConfig};

fn single_task() -> Dataset {
    let spec = DatasetSpec { n_tasks: 1, n_per_task: 256, feature_dim: 16, output_dim: 4, mode: TaskMode::Classification, noise_std: 0.0, seed: 0 };
    gen_multitask(&spec, Split::Train).unwrap()
}

fn multi_task() -> (Dataset, Dataset) {
    let spec = DatasetSpec::default_suite(20, 64, 3);
    (gen_multitask(&spec, Split::Train).unwrap(), gen_multitask(&spec, Split::Eval).unwrap())
}

fn team_host() -> FrozenHost {
    let mut host = FrozenHost::build(&[20, 24, 8], 1).unwrap();
    AdapterSpec::new(AdapterKind::TeamLora, 4, 2, 4.0).attach(&mut host, 1).unwrap();
    host
}

#[test]
fn lora_learns_a_separable_task() {
    let ds = single_task();
    let mut host = FrozenHost::build(&[17, 32, 4], 0).unwrap();
    AdapterSpec::new(AdapterKind::Lora, 1, 4, 8.0).attach(&mut host, 0).unwrap();
    let cfg = TrainConfig { lr: 0.01, steps: 500, batch_size: 32, eval_every: 100, ..TrainConfig::default() };
    let history = train(&mut host, &ds, None, &cfg).unwrap();
    assert_eq!(history.len(), 5);
    let acc = history.last().unwrap().tasks[0].accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert!(history.iter().all(|m| m.train_loss >= 0.0));
}

#[test]
fn frozen_weights_survive_training() {
    let (tr, ev) = multi_task();
    let mut host = team_host();
    let before = host.frozen_checksum();
    let cfg = TrainConfig { steps: 100, eval_every: 50, ..TrainConfig::default() };
    train(&mut host, &tr, Some(&ev), &cfg).unwrap();
    assert_eq!(host.frozen_checksum(), before);
    assert_ne!(host.trainable_params(), team_host().trainable_params());
}

#[test]
fn same_seed_same_history_and_csv() {
    let (tr, ev) = multi_task();
    let cfg = TrainConfig { steps: 60, eval_every: 20, seed: 5, ..TrainConfig::default() };
    let (mut a, mut b) = (team_host(), team_host());
    let ha = train(&mut a, &tr, Some(&ev), &cfg).unwrap();
    let hb = train(&mut b, &tr, Some(&ev), &cfg).unwrap();
    assert_eq!(metrics_csv(&ha, 4), metrics_csv(&hb, 4));
    let other = train(&mut team_host(), &tr, Some(&ev), &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(ha, other);
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let (tr, ev) = multi_task();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let cfg = TrainConfig { steps: 100, batch_size: 24, eval_every: 25, ..TrainConfig::default() };

    let mut straight = team_host();
    let full = train(&mut straight, &tr, Some(&ev), &cfg).unwrap();

    let mut first = team_host();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut history = trainer.run(&mut first, &tr, Some(&ev), 50).unwrap();
    save_checkpoint(&path, &trainer, &first).unwrap();
    drop((first, trainer));

    let mut resumed = team_host();
    let mut trainer = load_checkpoint(&path, &mut resumed).unwrap();
    assert_eq!(trainer.step_count(), 50);
    history.extend(trainer.run(&mut resumed, &tr, Some(&ev), 50).unwrap());

    for ((na, a), (nb, b)) in straight.trainable_params().iter().zip(resumed.trainable_params()) {
        assert_eq!(*na, nb);
        assert!(a.bit_eq(b), "{na}");
    }
    assert_eq!(full, history);
}

#[test]
fn checkpoint_into_other_architecture_fails_cleanly() {
    let (tr, _) = multi_task();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut host = team_host();
    let mut trainer = Trainer::new(TrainConfig { steps: 5, ..TrainConfig::default() }).unwrap();
    trainer.run(&mut host, &tr, None, 5).unwrap();
    save_checkpoint(&path, &trainer, &host).unwrap();

    let mut other = FrozenHost::build(&[20, 24, 8], 1).unwrap();
    AdapterSpec::new(AdapterKind::MoELora, 4, 2, 4.0).attach(&mut other, 1).unwrap();
    let before = other.clone();
    assert!(matches!(load_checkpoint(&path, &mut other), Err(Error::CheckpointMismatch(_))));
    assert_eq!(other, before);

    let mut wider = FrozenHost::build(&[20, 24, 8], 1).unwrap();
    wider.attach_adapter(0, AdapterConfig::teamlora(20, 24, 4, 3, 4.0, 0)).unwrap();
    assert!(load_checkpoint(&path, &mut wider).is_err());
}

#[test]
fn corrupt_checkpoint_applies_nothing() {
    let (tr, _) = multi_task();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut host = team_host();
    let mut trainer = Trainer::new(TrainConfig { steps: 5, ..TrainConfig::default() }).unwrap();
    trainer.run(&mut host, &tr, None, 5).unwrap();
    save_checkpoint(&path, &trainer, &host).unwrap();

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let mut target = team_host();
    let before = target.clone();
    assert!(load_checkpoint(&path, &mut target).is_err());
    assert_eq!(target, before);

    let text = String::from_utf8(bytes).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(&path, &mut target), Err(Error::UnsupportedVersion { found: 9, .. })));
    assert_eq!(target, before);
}

#[test]
fn regression_mode_trains_with_mse() {
    let spec = DatasetSpec { mode: TaskMode::Regression, noise_std: 0.05, ..DatasetSpec::default_suite(12, 64, 2) };
    let ds = gen_multitask(&spec, Split::Train).unwrap();
    let mut host = FrozenHost::build(&[12, 16, 8], 2).unwrap();
    AdapterSpec::new(AdapterKind::MoELora, 2, 2, 2.0).attach(&mut host, 0).unwrap();
    let cfg = TrainConfig { steps: 200, eval_every: 100, loss: teamlora::LossKind::Mse, ..TrainConfig::default() };
    let h = train(&mut host, &ds, None, &cfg).unwrap();
    assert!(h[1].train_loss < h[0].train_loss, "{h:?}");
}
