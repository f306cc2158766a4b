use peftlab::model::{pool, AdaptedModel, TaskKind, TransformerConfig};
use peftlab::peft::{
    attach_adapter, attach_lora, attach_prompt, count_trainable, expand_targets, make_freeze_plan, merge_lora,
    FreezeMode, FreezePlan,
};
use peftlab::seed::rng_from;
use peftlab::tensor::Tensor;
use peftlab::trainer::{train, RunConfig};
use proptest::prelude::*;
use rand::Rng;

fn base(kind: TaskKind, seed: u64) -> AdaptedModel {
    AdaptedModel::new(TransformerConfig::default(), kind, &mut rng_from(seed)).unwrap()
}

fn qv() -> Vec<String> {
    vec!["attn.wq".into(), "attn.wv".into()]
}

fn wrap_qv(m: &mut AdaptedModel, rank: usize, alpha: f64, seed: u64) {
    let targets = expand_targets(m, &qv());
    attach_lora(m, rank, alpha, &targets, &mut rng_from(seed)).unwrap();
}

/// Random non-reserved token sequences.
fn random_inputs(config: &TransformerConfig, count: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = rng_from(seed);
    let seq = |rng: &mut peftlab::seed::StreamRng| -> Vec<usize> {
        let n = rng.random_range(2..=12);
        (0..n).map(|_| rng.random_range(0..config.pad_id())).collect()
    };
    (0..count).map(|_| (seq(&mut rng), seq(&mut rng))).collect()
}

fn max_output_gap(a: &AdaptedModel, b: &AdaptedModel, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in random_inputs(a.config(), 100, seed) {
        let ha = a.encode_plain(&x, true).unwrap();
        let hb = b.encode_plain(&x, true).unwrap();
        worst = worst.max(ha.max_abs_diff(&hb));
        let la = a.pair_logits(&x, &y).unwrap();
        let lb = b.pair_logits(&x, &y).unwrap();
        worst = worst.max((la[0] - lb[0]).abs()).max((la[1] - lb[1]).abs());
    }
    worst
}

#[test]
fn fresh_lora_is_an_identity() {
    let plain = base(TaskKind::Pair, 1);
    let mut m = plain.clone();
    wrap_qv(&mut m, 4, 8.0, 2);
    assert!(max_output_gap(&plain, &m, 3) <= 1e-12);
}

#[test]
fn fresh_adapter_is_an_identity() {
    let plain = base(TaskKind::Pair, 4);
    let mut m = plain.clone();
    attach_adapter(&mut m, 8, &mut rng_from(5)).unwrap();
    assert!(max_output_gap(&plain, &m, 6) <= 1e-12);
}

#[test]
fn lora_forward_equals_explicit_merged_matrix() {
    let plain = base(TaskKind::Pair, 7);
    let mut m = plain.clone();
    let (rank, alpha) = (4, 8.0);
    let targets = expand_targets(&m, &qv());
    attach_lora(&mut m, rank, alpha, &targets, &mut rng_from(8)).unwrap();
    let mut rng = rng_from(9);
    let mut oracle = plain;
    for t in &targets {
        let a_name = format!("lora.{t}.a");
        let b_name = format!("lora.{t}.b");
        let b = Tensor::randn(m.param(&b_name).unwrap().shape(), 0.3, &mut rng);
        *m.params_mut().get_mut(&b_name).unwrap() = b.clone();
        let a = m.param(&a_name).unwrap().clone();
        // W' = W + (α/r)·B·A by explicit loops.
        let w = oracle.params_mut().get_mut(t).unwrap();
        let (rows, cols) = w.dims2().unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let mut s = 0.0;
                for k in 0..rank {
                    s += b.at(i, k) * a.at(k, j);
                }
                w.data_mut()[i * cols + j] += alpha / rank as f64 * s;
            }
        }
    }
    assert!(max_output_gap(&oracle, &m, 10) <= 1e-9);
}

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
fn merged_lora_matches_unmerged_after_training() {
    let run = train(&quick_config()).unwrap();
    let trained = run.model;
    assert!(trained
        .lora_adapters()
        .any(|a| trained.param(&a.b_name()).unwrap().data().iter().any(|&v| v != 0.0)));
    let mut merged = trained.clone();
    assert_eq!(merge_lora(&mut merged).unwrap(), 4);
    assert!(!merged.has_lora());
    assert!(max_output_gap(&trained, &merged, 11) <= 1e-9);

    // A fresh attach on the merged model is again output-identical.
    let mut again = merged.clone();
    wrap_qv(&mut again, 4, 8.0, 12);
    assert!(max_output_gap(&merged, &again, 13) <= 1e-12);
}

#[test]
fn adapters_plus_prompt_budget_on_default_config() {
    let mut m = base(TaskKind::Pair, 14);
    let before = m.params().total_elements();
    wrap_qv(&mut m, 4, 8.0, 15);
    let lora_added = m.params().total_elements() - before;
    // Two blocks, two wrapped d×d matrices each, 2·d·r values per matrix.
    let d = 32;
    assert_eq!(lora_added, 2 * 2 * (2 * d * 4));
    attach_prompt(&mut m, 8, &mut rng_from(16)).unwrap();

    let hybrid = make_freeze_plan(&m, FreezeMode::AdaptersPlusPrompt).unwrap();
    let full = make_freeze_plan(&m, FreezeMode::Full).unwrap();
    let head = 2 * d + 2;
    let enumerated: usize = m
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("lora.") || n.starts_with("head.") || *n == "prompt.embed")
        .map(|(_, t)| t.numel())
        .sum();
    let trainable = count_trainable(&m, &hybrid);
    assert_eq!(trainable, enumerated);
    assert_eq!(trainable, lora_added + 8 * d + head);
    assert_eq!(count_trainable(&m, &full), m.params().total_elements());
    assert_eq!(count_trainable(&m, &FreezePlan::empty()), 0);

    let ratio = trainable as f64 / count_trainable(&m, &full) as f64;
    assert!(ratio < 0.10, "{ratio}");
    // Fixture: 1346 of 22530 values.
    assert_eq!((trainable, count_trainable(&m, &full)), (1346, 22530));
}

#[test]
fn prompt_lengthens_the_encoding() {
    let mut m = base(TaskKind::Pair, 17);
    let x = [3, 4, 5, 6, 7];
    assert_eq!(m.encode_plain(&x, true).unwrap().shape(), &[5, 32]);
    attach_prompt(&mut m, 3, &mut rng_from(18)).unwrap();
    assert_eq!(m.encode_plain(&x, true).unwrap().shape(), &[8, 32]);
    assert_eq!(m.encode_plain(&x, false).unwrap().shape(), &[5, 32]);
}

proptest! {
    #[test]
    fn pool_is_the_column_average(rows in 1usize..10, seed in any::<u64>()) {
        let d = 6;
        let h = Tensor::randn(&[rows, d], 1.0, &mut rng_from(seed));
        let f = pool(&h).unwrap();
        for c in 0..d {
            let mut s = 0.0;
            for r in 0..rows {
                s += h.at(r, c);
            }
            prop_assert!((f.as_slice()[c] - s / rows as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_names_never_enter_the_plan(mode in prop::sample::select(vec![
        FreezeMode::HeadOnly, FreezeMode::AdaptersOnly, FreezeMode::AdaptersPlusPrompt,
    ])) {
        let mut m = base(TaskKind::Span, 19);
        wrap_qv(&mut m, 2, 4.0, 20);
        attach_prompt(&mut m, 4, &mut rng_from(21)).unwrap();
        let plan = make_freeze_plan(&m, mode).unwrap();
        for name in plan.names() {
            prop_assert!(!name.starts_with("block.") && !name.starts_with("embed."), "{}", name);
        }
    }
}
