use cellsearch::data::{split, synthetic_shapes, Loader, NormStats, SplitKind, SplitSpec};
use cellsearch::genotype::{CellGenotype, Genotype};
use cellsearch::optim::{
    arch_step, evaluate, search, sgd_step, train_fixed, weight_step, AdamState, ArchOptConfig, Schedule, SearchConfig,
    SgdState, TrainConfig, WeightOptConfig,
};
use cellsearch::search_space::{AlphaParams, CellKind, OperatorKind, OperatorMask};
use cellsearch::seed;
use cellsearch::supernet::{NetMode, NetworkConfig, SuperNet};

fn network(classes: usize, mask: OperatorMask) -> NetworkConfig {
    NetworkConfig {
        num_cells: 3,
        init_channels: 4,
        num_classes: classes,
        reduce_positions: None,
        input_size: 8,
        operator_mask: mask,
    }
}

fn loaders(classes: usize, per_class: usize) -> (Loader, Loader, Vec<String>) {
    let ds = synthetic_shapes(classes, per_class, 8, 3).unwrap();
    let (a, b) = split(
        &ds,
        SplitSpec {
            kind: SplitKind::SearchHalf,
            seed: 1,
        },
    )
    .unwrap();
    let mut train = Loader::new(&a, 8, NormStats::default()).unwrap();
    let stats = train.compute_stats().unwrap();
    train.stats = stats.clone();
    let val = Loader::new(&b, 8, stats).unwrap();
    (train, val, ds.class_names)
}

fn weights(epochs: usize, batch: usize) -> WeightOptConfig {
    WeightOptConfig {
        epochs,
        batch_size: batch,
        ..WeightOptConfig::search()
    }
}

fn snapshot<T: cellsearch::tensor::Real>(net: &SuperNet<T>) -> Vec<(String, Vec<T>)> {
    net.params
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.data().to_vec()))
        .chain(net.params.buffers().map(|(n, b)| (n.to_string(), b.data().to_vec())))
        .collect()
}

fn alpha_rows(a: &AlphaParams<f64>) -> Vec<Vec<f64>> {
    let mut rows = a.rows_f64(CellKind::Normal);
    rows.extend(a.rows_f64(CellKind::Reduce));
    rows
}

#[test]
fn weight_steps_reduce_batch_loss() {
    let (train, _, _) = loaders(2, 16);
    let g = Genotype::new(
        CellGenotype::uniform(OperatorKind::SepConv3),
        CellGenotype::uniform(OperatorKind::MaxPool3),
    );
    let mut net = SuperNet::<f64>::build(
        &network(2, OperatorMask::full()),
        NetMode::Fixed(g),
        &mut seed::rng(0, "init"),
    )
    .unwrap();
    let batch = &train.sequential::<f64>(16).unwrap()[0];
    let cfg = WeightOptConfig {
        schedule: Schedule::Constant,
        ..weights(1, 16)
    };
    let mut state = SgdState::default();
    let first = weight_step(&mut net, None, batch, &mut state, &cfg, 0).unwrap().loss;
    let mut last = first;
    for _ in 0..15 {
        last = weight_step(&mut net, None, batch, &mut state, &cfg, 0).unwrap().loss;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn alternating_steps_touch_only_their_own_variables() {
    let (train, val, _) = loaders(2, 8);
    let cfg = network(2, OperatorMask::full());
    let mut net = SuperNet::<f64>::build(&cfg, NetMode::Relaxed, &mut seed::rng(0, "init")).unwrap();
    let mut alphas = AlphaParams::<f64>::random(cfg.operator_mask.clone(), &mut seed::rng(0, "alpha")).unwrap();
    let tb = &train.sequential::<f64>(8).unwrap()[0];
    let vb = &val.sequential::<f64>(8).unwrap()[0];

    let before_alpha = alpha_rows(&alphas);
    let before_net = snapshot(&net);
    weight_step(&mut net, Some(&alphas), tb, &mut SgdState::default(), &weights(1, 8), 0).unwrap();
    assert_eq!(alpha_rows(&alphas), before_alpha);
    assert_ne!(snapshot(&net), before_net);

    let before_net = snapshot(&net);
    arch_step(
        &net,
        &mut alphas,
        vb,
        &mut AdamState::default(),
        &ArchOptConfig::default(),
    )
    .unwrap();
    assert_eq!(snapshot(&net), before_net);
    assert_ne!(alpha_rows(&alphas), before_alpha);

    let fixed = SuperNet::<f64>::build(
        &cfg,
        NetMode::Fixed(Genotype::new(
            CellGenotype::uniform(OperatorKind::Skip),
            CellGenotype::uniform(OperatorKind::Skip),
        )),
        &mut seed::rng(0, "init"),
    )
    .unwrap();
    assert!(arch_step(
        &fixed,
        &mut alphas,
        vb,
        &mut AdamState::default(),
        &ArchOptConfig::default()
    )
    .is_err());
}

#[test]
fn weight_decay_shrinks_weights_without_gradient() {
    let cfg = network(2, OperatorMask::full());
    let mut net = SuperNet::<f64>::build(&cfg, NetMode::Relaxed, &mut seed::rng(0, "init")).unwrap();
    let norm = |n: &SuperNet<f64>| {
        n.params
            .iter()
            .flat_map(|(_, p)| p.value.data().to_vec())
            .map(|v| v * v)
            .sum::<f64>()
    };
    let before = norm(&net);
    let opt = WeightOptConfig {
        momentum: 0.0,
        weight_decay: 0.1,
        lr0: 0.5,
        schedule: Schedule::Constant,
        ..weights(1, 8)
    };
    sgd_step(&mut net.params, &mut SgdState::default(), &opt, 0).unwrap();
    let after = norm(&net);
    assert!((after - before * 0.95f64.powi(2)).abs() < 1e-9 * before);
}

fn tiny_search(epochs: usize, arch: ArchOptConfig) -> SearchConfig {
    SearchConfig {
        network: network(2, OperatorMask::full()),
        weights: weights(epochs, 8),
        arch,
    }
}

#[test]
fn zero_arch_learning_rate_freezes_coefficients() {
    let (train, val, names) = loaders(2, 8);
    let arch = ArchOptConfig {
        lr: 0.0,
        ..ArchOptConfig::default()
    };
    let out = search::<f64>(&tiny_search(2, arch), &train, &val, &names, 5, |_, _| Ok(())).unwrap();
    let init = AlphaParams::<f64>::random(OperatorMask::full(), &mut seed::rng(5, "alpha")).unwrap();
    for a in &out.trajectory {
        assert_eq!(alpha_rows(a), alpha_rows(&init));
    }
}

#[test]
fn search_is_reproducible_and_keeps_best_snapshot() {
    let (train, val, names) = loaders(2, 12);
    let cfg = tiny_search(4, ArchOptConfig::default());
    let mut seen = Vec::new();
    let a = search::<f64>(&cfg, &train, &val, &names, 9, |r, al| {
        seen.push((r.epoch, alpha_rows(al)));
        Ok(())
    })
    .unwrap();
    let b = search::<f64>(&cfg, &train, &val, &names, 9, |_, _| Ok(())).unwrap();
    assert_eq!(a.records.len(), 4);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!(x.same_values(y));
    }
    for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
        assert_eq!(alpha_rows(x), alpha_rows(y));
    }
    for (k, (epoch, rows)) in seen.iter().enumerate() {
        assert_eq!(*epoch, k);
        assert_eq!(rows, &alpha_rows(&a.trajectory[k]));
    }
    let accs: Vec<f64> = a.records.iter().map(|r| r.val_acc.unwrap()).collect();
    let best = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_epoch, accs.iter().position(|&v| v == best).unwrap());
    assert_eq!(alpha_rows(&a.best), alpha_rows(&a.trajectory[a.best_epoch]));

    let c = search::<f64>(&cfg, &train, &val, &names, 10, |_, _| Ok(())).unwrap();
    assert_ne!(alpha_rows(&c.trajectory[0]), alpha_rows(&a.trajectory[0]));
}

#[test]
fn short_search_beats_chance() {
    let (train, val, names) = loaders(2, 32);
    let out = search::<f32>(
        &tiny_search(4, ArchOptConfig::default()),
        &train,
        &val,
        &names,
        0,
        |_, _| Ok(()),
    )
    .unwrap();
    let best = out.records.iter().filter_map(|r| r.val_acc).fold(0.0, f64::max);
    assert!(best > 0.5, "{:?}", out.records);
}

#[test]
fn zero_epochs_return_the_initial_network() {
    let (train, val, names) = loaders(2, 8);
    let g = Genotype::new(
        CellGenotype::uniform(OperatorKind::SepConv5),
        CellGenotype::uniform(OperatorKind::AvgPool3),
    );
    let cfg = TrainConfig {
        network: network(2, OperatorMask::full()),
        weights: WeightOptConfig {
            epochs: 0,
            ..WeightOptConfig::final_training()
        },
        augment: true,
    };
    let (mut net, records) = train_fixed::<f64>(&g, &cfg, &train, Some(&val), &names, 4, |_| Ok(())).unwrap();
    assert!(records.is_empty());
    let fresh = SuperNet::<f64>::build(&cfg.network, NetMode::Fixed(g), &mut seed::rng(4, "init")).unwrap();
    assert_eq!(snapshot(&net), snapshot(&fresh));
    let eval = evaluate(&mut net, None, &val, &names, 4).unwrap();
    assert_eq!(eval.confusion.total() as usize, val.len());
}

#[test]
fn exponential_schedule_values() {
    let w = WeightOptConfig::final_training();
    for e in 0..150 {
        assert!((w.lr(e) - 0.1 * 0.97f64.powi(e as i32)).abs() < 1e-12);
    }
    let s = WeightOptConfig::search();
    assert_eq!(s.lr(0), 0.025);
    assert!(s.lr(49) < 1e-4);
}
