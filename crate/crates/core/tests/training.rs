use peftlab::model::{AdaptedModel, TaskKind};
use peftlab::objective::sp_regularizer_value;
use peftlab::peft::FreezeMode;
use peftlab::seed::rng_from;
use peftlab::trainer::{augmentation_sweep, evaluate, train, RunConfig, Split};
use peftlab::Error;

fn quick_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.source_train = 400;
    c.data.target_train = 40;
    c.data.target_dev = 40;
    c.data.target_test = 40;
    c.train.pretrain_epochs = 2;
    c.train.epochs = 3;
    c
}

#[test]
fn zero_epochs_returns_theta0() {
    let mut c = quick_config();
    c.train.epochs = 0;
    let run = train(&c).unwrap();
    for (name, t0) in run.snapshot.iter() {
        assert_eq!(run.model.param(name).unwrap(), t0);
    }
    assert_eq!(run.model, run.initial);
    assert!(run.trace.iter().all(|r| r.metrics.loss.reg == 0.0));
    assert_eq!(run.trace.len(), 2);
}

#[test]
fn same_config_gives_identical_traces() {
    let c = quick_config();
    let a = train(&c).unwrap();
    let b = train(&c).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model, b.model);
    let other = train(&c.with_seed(2)).unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn hybrid_plan_leaves_backbone_untouched() {
    let run = train(&quick_config()).unwrap();
    assert_eq!(run.config.peft.freeze, FreezeMode::AdaptersPlusPrompt);
    let frozen: Vec<&str> = run
        .model
        .params()
        .names()
        .filter(|n| !run.plan.contains(n))
        .collect();
    assert!(frozen.iter().any(|n| n.starts_with("block.")));
    for name in &frozen {
        assert_eq!(
            run.model.param(name).unwrap().data(),
            run.initial.param(name).unwrap().data(),
            "{name}"
        );
    }
    // Anchor the frozen names at the start of transfer: exactly zero.
    let anchor = peftlab::objective::ThetaSnapshot::from_map(
        frozen
            .iter()
            .map(|n| (n.to_string(), run.initial.param(n).unwrap().clone()))
            .collect(),
    );
    assert_eq!(sp_regularizer_value(&run.model, frozen.iter().copied(), &anchor).unwrap(), 0.0);
    // Trainable members did move.
    assert!(sp_regularizer_value(&run.model, run.plan.names(), &run.snapshot).unwrap() > 0.0);
}

#[test]
fn trace_rows_decompose_exactly() {
    let mut c = quick_config();
    c.loss.lambda = 0.7;
    c.loss.beta = 0.05;
    let run = train(&c).unwrap();
    for r in &run.trace {
        let l = r.metrics.loss;
        assert!((l.total - (l.task + 0.7 * l.align + 0.05 * l.reg)).abs() < 1e-6);
    }
    assert!(run.trace.iter().any(|r| r.metrics.loss.align > 0.0));

    c.loss.lambda = 0.0;
    c.loss.beta = 0.0;
    let run = train(&c).unwrap();
    for r in &run.trace {
        assert_eq!(r.metrics.loss.total, r.metrics.loss.task);
        assert_eq!(r.metrics.loss.align, 0.0);
    }
}

#[test]
fn trace_layout() {
    let run = train(&quick_config()).unwrap();
    let splits: Vec<(usize, Split)> = run.trace.iter().map(|r| (r.epoch, r.split)).collect();
    let mut expected = vec![(0, Split::Dev)];
    for e in 1..=3 {
        expected.push((e, Split::Train));
        expected.push((e, Split::Dev));
    }
    expected.push((3, Split::Test));
    assert_eq!(splits, expected);
}

#[test]
fn degenerate_sweep_equals_plain_training() {
    let c = quick_config();
    let sweep = augmentation_sweep(&c, &[0.0], 0.4).unwrap();
    assert_eq!(sweep.len(), 1);
    let plain = train(&c).unwrap();
    assert_eq!(sweep[0].metrics, *plain.test());
    assert_eq!(sweep[0].train_size, 40);
}

#[test]
fn configuration_errors() {
    let mut c = quick_config();
    c.peft.lora_rank = 0;
    c.peft.adapter_bottleneck = 0;
    c.peft.freeze = FreezeMode::AdaptersOnly;
    assert!(matches!(train(&c), Err(Error::Config(_))));

    let mut c = quick_config();
    c.data.target_train = 41;
    assert!(matches!(train(&c), Err(Error::LowResource { .. })));
}

#[test]
fn divergence_names_the_step() {
    let mut c = quick_config();
    c.peft.freeze = FreezeMode::Full;
    c.train.lr = Some(1e150);
    c.train.clip_norm = 1e300;
    match train(&c) {
        Err(Error::Numerical { context, .. }) => assert!(context.contains("step"), "{context}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn random_model_is_at_chance_on_pair_dev() {
    let (mut accs, mut majorities) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let c = RunConfig::default().with_seed(seed);
        let data = c.generate_corpus().unwrap();
        let m = AdaptedModel::new(c.model.clone(), TaskKind::Pair, &mut rng_from(seed)).unwrap();
        accs.push(evaluate(&m, &data.target_dev, TaskKind::Pair).unwrap().accuracy);
        let positives = data.target_dev.iter().filter(|x| x.label.class() == Some(1)).count();
        majorities.push(positives.max(data.target_dev.len() - positives) as f64 / data.target_dev.len() as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&accs) - 0.5).abs() <= 0.05, "{accs:?}");
    assert!((mean(&majorities) - 0.5).abs() <= 0.05, "{majorities:?}");
}

#[test]
fn evaluate_rejects_empty_split() {
    let c = RunConfig::default();
    let m = AdaptedModel::new(c.model.clone(), TaskKind::Pair, &mut rng_from(1)).unwrap();
    assert!(matches!(evaluate(&m, &[], TaskKind::Pair), Err(Error::Contract(_))));
}

#[test]
fn default_transfer_lowers_dev_loss() {
    let run = train(&RunConfig::default()).unwrap();
    let (before, after) = (run.initial_dev().loss.total, run.final_dev().loss.total);
    assert!(after < before, "{before} -> {after}");
}
