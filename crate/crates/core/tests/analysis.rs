use teamlora::analysis::*;
use teamlora::tasks::{gen_multitask, Split};
use teamlora::{AdapterConfig, AdapterKind, AdapterSpec, DatasetSpec, Error, FrozenHost, LossKind, TrainConfig};

const CE: LossKind = LossKind::CrossEntropy;

/// Composite trapezoid weights on `n` nodes over [0, 1].
fn trapezoid(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n).map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h }).collect()
}

#[test]
fn two_expert_estimate_matches_grid_quadrature() {
    let (host, ds) = shapley_fixture(2, 0).unwrap();
    for expert in 0..2 {
        let other = 1 - expert;
        let mut grid = 0.0;
        for (i, w) in trapezoid(101).into_iter().enumerate() {
            let omega = i as f64 / 100.0;
            let mut with = vec![0.0; 2];
            with[expert] = omega;
            with[other] = 1.0 - omega;
            let mut without = with.clone();
            without[expert] = 0.0;
            grid += w * (payoff(&host, &ds, CE, &with).unwrap() - payoff(&host, &ds, CE, &without).unwrap());
        }
        let mc = shapley_mc(&host, &ds, CE, expert, 10_000, 7).unwrap();
        let rel = (mc.estimate - grid).abs() / grid.abs();
        assert!(rel < 0.02, "expert {expert}: mc {} grid {grid} rel {rel}", mc.estimate);
    }
}

#[test]
fn three_expert_estimate_matches_grid_quadrature() {
    // s = (1 − ω)·(t, 1 − t) with t uniform is Dirichlet(1) on the other two.
    let (host, ds) = shapley_fixture(3, 1).unwrap();
    let w = trapezoid(101);
    let mut grid = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let omega = i as f64 / 100.0;
        for (j, wj) in w.iter().enumerate() {
            let t = j as f64 / 100.0;
            let without = [0.0, (1.0 - omega) * t, (1.0 - omega) * (1.0 - t)];
            let with = [omega, without[1], without[2]];
            grid += wi * wj * (payoff(&host, &ds, CE, &with).unwrap() - payoff(&host, &ds, CE, &without).unwrap());
        }
    }
    let mc = shapley_mc(&host, &ds, CE, 0, 10_000, 3).unwrap();
    let rel = (mc.estimate - grid).abs() / grid.abs();
    assert!(rel < 0.02, "mc {} grid {grid} rel {rel}", mc.estimate);
}

#[test]
fn zero_b_expert_has_exactly_zero_value() {
    for k in [2, 3] {
        let (mut host, ds) = shapley_fixture(k, 2).unwrap();
        host.adapter_mut(0).unwrap().zero_expert(1).unwrap();
        let est = shapley_mc(&host, &ds, CE, 1, 200, 0).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.std_error, 0.0);
    }
}

#[test]
fn identical_experts_have_equal_values() {
    let (mut host, ds) = shapley_fixture(2, 3).unwrap();
    host.adapter_mut(0).unwrap().duplicate_expert(0).unwrap();
    let a = shapley_mc(&host, &ds, CE, 0, 2_000, 5).unwrap();
    let b = shapley_mc(&host, &ds, CE, 1, 2_000, 5).unwrap();
    let tol = 4.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.estimate - b.estimate).abs() <= tol, "{a:?} {b:?}");
}

#[test]
fn shapley_is_seed_deterministic_and_guards_inputs() {
    let (host, ds) = shapley_fixture(2, 4).unwrap();
    assert_eq!(shapley_mc(&host, &ds, CE, 0, 150, 9).unwrap(), shapley_mc(&host, &ds, CE, 0, 150, 9).unwrap());
    assert!(matches!(shapley_mc(&host, &ds, CE, 0, 99, 9), Err(Error::InvalidConfig(_))));
    assert!(shapley_mc(&host, &ds, CE, 2, 100, 9).is_err());
    let (single, ds1) = shapley_fixture(1, 4).unwrap();
    assert!(matches!(shapley_mc(&single, &ds1, CE, 0, 100, 9), Err(Error::Degenerate(_))));
}

fn suite_data() -> (teamlora::Dataset, teamlora::Dataset) {
    let spec = DatasetSpec::default_suite(20, 96, 6);
    (gen_multitask(&spec, Split::Train).unwrap(), gen_multitask(&spec, Split::Eval).unwrap())
}

fn host_with(kind: AdapterKind, k: usize) -> FrozenHost {
    let mut host = FrozenHost::build(&[20, 24, 8], 6).unwrap();
    AdapterSpec::new(kind, k, 2, 4.0).attach(&mut host, 6).unwrap();
    host
}

#[test]
fn untrained_linear_router_is_near_uniform() {
    let (_, ev) = suite_data();
    for k in [2, 4, 8] {
        // Router logits with std 0.1 instead of the default unit scale.
        let mut host = host_with(AdapterKind::MoELora, k);
        let mut rng = teamlora::rng::stream(k as u64, "small-router", 0);
        for l in [0, 1] {
            let a = host.adapter_mut(l).unwrap();
            let d_in = a.config().d_in;
            for (name, m) in a.params_mut() {
                if name == "router.W" {
                    *m = teamlora::Matrix::randn(d_in, k, 0.1 / (d_in as f64).sqrt(), &mut rng);
                }
            }
        }
        let report = expert_utilization(&host, &ev).unwrap();
        for layer in &report.layers {
            let ln_k = (k as f64).ln();
            for (t, h) in layer.entropy.iter().enumerate() {
                assert!(*h <= ln_k);
                assert!(*h >= 0.95 * ln_k, "k={k} layer {} task {t}: {h} vs {ln_k}", layer.layer);
            }
            for s in &layer.omega_row_sums {
                assert!((s - 1.0).abs() <= 1e-9);
            }
            assert_eq!(layer.negative_omega_frequency, 0.0);
        }
    }
}

#[test]
fn single_expert_load_is_degenerate() {
    let (_, ev) = suite_data();
    for kind in [AdapterKind::Lora, AdapterKind::MoELora, AdapterKind::TeamLora] {
        let report = expert_utilization(&host_with(kind, 1), &ev).unwrap();
        for layer in &report.layers {
            assert!(layer.entropy.iter().all(|&h| h == 0.0));
            assert!(layer.argmax_entropy.iter().all(|&h| h == 0.0));
        }
        let ret = top1_retention(&host_with(kind, 1), &ev, CE, false).unwrap();
        assert_eq!(ret.top1, ret.all);
    }
}

#[test]
fn trained_reports_are_well_formed() {
    let (tr, ev) = suite_data();
    let cfg = TrainConfig { steps: 150, eval_every: 150, ..TrainConfig::default() };
    for kind in [AdapterKind::MoELora, AdapterKind::TeamLora] {
        let mut host = host_with(kind, 4);
        teamlora::train::train(&mut host, &tr, Some(&ev), &cfg).unwrap();
        let load = expert_utilization(&host, &ev).unwrap();
        for layer in &load.layers {
            assert_eq!(layer.mean_omega.len(), 4);
            assert!(layer.entropy.iter().all(|h| (0.0..=layer.max_entropy).contains(h)));
            assert!(layer.argmax_share.iter().all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-12));
            assert!((0.0..=1.0).contains(&layer.negative_omega_frequency));
        }
        let ret = top1_retention(&host, &ev, CE, false).unwrap();
        assert_eq!(ret.solo.len(), 4);
        assert!(ret.retention_ratio.is_some_and(|r| r.is_finite() && r >= 0.0));
    }
}

#[test]
fn duplicated_experts_score_alike() {
    let (_, ev) = suite_data();
    for kind in [AdapterKind::MoELora, AdapterKind::TeamLora] {
        let mut host = host_with(kind, 3);
        let mut rng = teamlora::rng::stream(0, "dup", 0);
        for l in [0, 1] {
            let a = host.adapter_mut(l).unwrap();
            a.perturb(0.3, &mut rng);
            a.duplicate_expert(1).unwrap();
        }
        let plain = top1_retention(&host, &ev, CE, false).unwrap();
        assert!(plain.solo.windows(2).all(|w| w[0] == w[1]), "{kind:?} {plain:?}");
        let renorm = top1_retention(&host, &ev, CE, true).unwrap();
        assert!(renorm.solo.windows(2).all(|w| w[0] == w[1]));
        if kind == AdapterKind::MoELora {
            // Weights sum to one, so a renormalized solo expert is the full model.
            assert_eq!(renorm.solo[0].accuracy, renorm.all.accuracy);
            assert!((renorm.solo[0].loss - renorm.all.loss).abs() < 1e-12);
        }
    }
}

#[test]
fn ablation_grid_shape_and_determinism() {
    let (tr, ev) = suite_data();
    let spec = AblationSpec {
        host_dims: vec![20, 24, 8],
        host_seed: 0,
        adapter: AdapterSpec::new(AdapterKind::TeamLora, 4, 2, 4.0),
        train: TrainConfig { steps: 40, eval_every: 40, ..TrainConfig::default() },
        seeds: vec![0, 1],
    };
    let a = ablation_grid(&tr, &ev, &spec).unwrap();
    let b = ablation_grid(&tr, &ev, &spec).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.rows.len(), 4);
    assert!(a.params_matched);
    let flags: Vec<(bool, bool)> = a.rows.iter().map(|r| (r.collaboration, r.competition)).collect();
    assert_eq!(flags, [(false, false), (false, true), (true, false), (true, true)]);
    assert_eq!(a.rows[0].adapter.config_for(20, 24, 1), AdapterConfig::moelora(20, 24, 4, 2, 4.0, 1));
    assert_eq!(ablation_table(&a).lines().count(), 6);
}

#[test]
fn measured_counts_match_for_all_kinds() {
    let mut configs = vec![AdapterConfig::lora(32, 16, 8, 1.0, 0)];
    for k in [1, 2, 3, 4, 8] {
        configs.push(AdapterConfig::moelora(32, 16, k, 4, 1.0, 0));
        configs.push(AdapterConfig::teamlora(32, 16, k, 4, 1.0, 0));
    }
    let report = cost_report(&configs, 7, 0).unwrap();
    assert!(report.counts_match);
    for e in &report.entries {
        let k = e.config.k as u64;
        let expected = match e.config.kind {
            AdapterKind::Lora => 2,
            AdapterKind::MoELora => 2 * k,
            AdapterKind::TeamLora => k + 1,
        };
        assert_eq!(e.measured.branch_matmuls, expected, "{}", e.label);
    }
}
