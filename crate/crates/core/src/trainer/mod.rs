//! Training under a freeze plan, evaluation, and the experiment drivers.
//!
//! A run is fully described by a [`RunConfig`]. It generates the synthetic
//! corpus, obtains a source-language model (pretrained on the source split
//! and cached per configuration), attaches the adaptation modules, captures
//! θ₀ and then minimises the composite objective on the target split with a
//! masked Adam update.

mod experiments;
mod metrics;
mod optim;

pub use experiments::{
    augmentation_sweep, augmentation_sweep_with_cache, mean_curve, stability, stability_with_cache,
    StabilityReport, SweepPoint,
};
pub use metrics::{evaluate, span_f1, Metrics, Tally};
pub use optim::{apply_gradients_masked, zero_grad, AdamHyper, OptimizerState};

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_task, synthesize_pseudo, AugmentationPlan, Dataset, Label, SplitSpec, TaskInstance};
use crate::error::{Error, Result};
use crate::model::{argmax, predict_span, AdaptedModel, Bound, TaskKind, TransformerConfig};
use crate::objective::{
    alignment_loss, span_task_loss, sp_regularizer, task_loss, total_loss, LossBreakdown, LossWeights,
    ThetaSnapshot,
};
use crate::peft::{self, make_freeze_plan, FreezeMode, FreezePlan};
use crate::seed::SeedStreams;
use crate::tensor::{Tape, Tensor, Var};

/// Adam rate for plans that leave the backbone frozen.
pub const PEFT_LR: f64 = 3e-3;
/// Adam rate for full fine-tuning.
pub const FULL_LR: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    /// Soft-prompt rows; 0 attaches no prompt.
    pub prompt_len: usize,
    /// LoRA rank; 0 attaches no LoRA.
    pub lora_rank: usize,
    /// LoRA scale numerator; `None` means `2·rank`.
    pub lora_alpha: Option<f64>,
    /// Weights to wrap, as full names or per-block suffixes.
    pub lora_targets: Vec<String>,
    /// Bottleneck adapter width; 0 attaches no adapter.
    pub adapter_bottleneck: usize,
    pub freeze: FreezeMode,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            prompt_len: 8,
            lora_rank: 4,
            lora_alpha: None,
            lora_targets: vec!["attn.wq".into(), "attn.wv".into()],
            adapter_bottleneck: 0,
            freeze: FreezeMode::AdaptersPlusPrompt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: TaskKind,
    pub source_train: usize,
    pub target_train: usize,
    pub target_dev: usize,
    pub target_test: usize,
    /// Morphology-noise rate of the cipher language.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Pair,
            source_train: 2000,
            target_train: 200,
            target_dev: 200,
            target_test: 500,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Transfer learning rate; `None` picks by freeze mode.
    pub lr: Option<f64>,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Epochs of full training on the source split that produce the source model.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: None,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            pretrain_epochs: 20,
            pretrain_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub ratio: f64,
    pub drift: f64,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: TransformerConfig,
    pub peft: PeftConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: TransformerConfig::default(),
            peft: PeftConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.split_spec().validate()?;
        self.augment_plan().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.data.noise) {
            return Err(Error::Config(format!("data.noise {} outside [0, 1]", self.data.noise)));
        }
        let lr = self.transfer_lr();
        if !(lr.is_finite() && lr > 0.0) || !(self.train.pretrain_lr.is_finite() && self.train.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn streams(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            source_train: self.data.source_train,
            target_train: self.data.target_train,
            target_dev: self.data.target_dev,
            target_test: self.data.target_test,
            seed: self.streams().derive("corpus"),
        }
    }

    pub fn augment_plan(&self) -> AugmentationPlan {
        AugmentationPlan {
            ratio: self.augment.ratio,
            drift: self.augment.drift,
            seed: self.streams().derive("augment"),
        }
    }

    pub fn transfer_lr(&self) -> f64 {
        self.train.lr.unwrap_or(match self.peft.freeze {
            FreezeMode::Full => FULL_LR,
            _ => PEFT_LR,
        })
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            b1: self.train.b1,
            b2: self.train.b2,
            eps: self.train.eps,
            clip_norm: Some(self.train.clip_norm),
        }
    }

    /// Short identifier used in metric files.
    pub fn run_id(&self) -> String {
        format!("{}-{}-seed{}", self.data.kind, self.peft.freeze, self.seed)
    }

    /// The same configuration with another root seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn generate_corpus(&self) -> Result<Dataset> {
        self.validate()?;
        generate_task(
            self.data.kind,
            &self.split_spec(),
            self.model.vocab_size,
            self.data.noise,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One line of the metric trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: Split,
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub model: AdaptedModel,
    pub plan: FreezePlan,
    pub snapshot: ThetaSnapshot,
    /// Model state right after adaptation modules were attached.
    pub initial: AdaptedModel,
    pub trace: Vec<TraceRow>,
    pub train_size: usize,
}

impl RunOutcome {
    fn last(&self, split: Split) -> &Metrics {
        &self
            .trace
            .iter()
            .rev()
            .find(|r| r.split == split)
            .expect("every run records dev and test rows")
            .metrics
    }

    pub fn final_dev(&self) -> &Metrics {
        self.last(Split::Dev)
    }

    pub fn initial_dev(&self) -> &Metrics {
        &self
            .trace
            .iter()
            .find(|r| r.split == Split::Dev)
            .expect("epoch-0 dev row")
            .metrics
    }

    pub fn test(&self) -> &Metrics {
        self.last(Split::Test)
    }
}

/// Source models keyed by everything that determines them, so runs that
/// differ only in transfer settings share one pretraining.
#[derive(Debug, Default)]
pub struct SourceModelCache {
    models: HashMap<String, AdaptedModel>,
}

impl SourceModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    fn key(config: &RunConfig) -> String {
        serde_json::json!({
            "seed": config.seed,
            "model": config.model,
            "data": config.data,
            "epochs": config.train.pretrain_epochs,
            "lr": config.train.pretrain_lr,
            "batch": config.train.batch_size,
            "adam": [config.train.b1, config.train.b2, config.train.eps, config.train.clip_norm],
        })
        .to_string()
    }

    pub fn get_or_pretrain(&mut self, config: &RunConfig, data: &Dataset) -> Result<AdaptedModel> {
        let key = Self::key(config);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let m = pretrain_source_model(config, data)?;
        self.models.insert(key, m.clone());
        Ok(m)
    }
}

/// Trains backbone and head on the source split with the task loss only.
pub fn pretrain_source_model(config: &RunConfig, data: &Dataset) -> Result<AdaptedModel> {
    let streams = config.streams();
    let mut model = AdaptedModel::new(config.model.clone(), config.data.kind, &mut streams.rng("init"))?;
    let plan = make_freeze_plan(&model, FreezeMode::Full)?;
    let mut opt = OptimizerState::new(&model, &plan, config.hyper(config.train.pretrain_lr))?;
    let mut order_rng = streams.rng("pretrain_order");
    let no_align = LossWeights { lambda: 0.0, beta: 0.0 };
    let mut order: Vec<usize> = (0..data.source_train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.train.pretrain_epochs {
        order.shuffle(&mut order_rng);
        let mut tally = Tally::default();
        for idx in order.chunks(config.train.batch_size) {
            step += 1;
            let batch: Vec<&TaskInstance> = idx.iter().map(|&i| &data.source_train[i]).collect();
            train_step(&mut model, &plan, &mut opt, &batch, &no_align, &SourceFeatures::default(), None, &mut tally)
                .map_err(|e| with_step_context(e, "pretraining", step, epoch))?;
        }
        log::debug!(
            "pretrain epoch {epoch}: train {:.3}",
            tally.finish(config.data.kind, LossBreakdown::default()).primary(config.data.kind)
        );
    }
    Ok(model)
}

fn with_step_context(e: Error, phase: &str, step: usize, epoch: usize) -> Error {
    match e {
        Error::Numerical { detail, .. } => Error::Numerical {
            context: format!("{phase} step {step} (epoch {epoch})"),
            detail,
        },
        other => other,
    }
}

/// Attaches the configured prompt, LoRA and adapter to a source model.
pub fn attach_modules(model: &mut AdaptedModel, config: &RunConfig) -> Result<()> {
    let mut rng = config.streams().rng("peft");
    let p = &config.peft;
    if p.lora_rank > 0 {
        let targets = peft::expand_targets(model, &p.lora_targets);
        let alpha = p.lora_alpha.unwrap_or(2.0 * p.lora_rank as f64);
        peft::attach_lora(model, p.lora_rank, alpha, &targets, &mut rng)?;
    }
    if p.adapter_bottleneck > 0 {
        peft::attach_adapter(model, p.adapter_bottleneck, &mut rng)?;
    }
    if p.prompt_len > 0 {
        peft::attach_prompt(model, p.prompt_len, &mut rng)?;
    }
    Ok(())
}

/// Pooled feature of an instance's full model input.
fn input_feature(model: &AdaptedModel, tape: &mut Tape, bound: &Bound, x: &TaskInstance) -> Result<Var> {
    match &x.tokens_b {
        Some(b) => {
            let joined = model.join_pair(&x.tokens, b);
            model.feature(tape, bound, &joined)
        }
        None => model.feature(tape, bound, &x.tokens),
    }
}

/// Source-language features `f_s(x_s)` of parallel counterparts, computed
/// once with the source model before any adaptation module is attached.
#[derive(Clone, Debug, Default)]
pub struct SourceFeatures {
    by_pair: HashMap<u64, Tensor>,
}

impl SourceFeatures {
    pub fn compute<'a>(
        source: &AdaptedModel,
        splits: impl IntoIterator<Item = &'a [TaskInstance]>,
    ) -> Result<Self> {
        let mut by_pair = HashMap::new();
        for split in splits {
            for x in split {
                if let Some(p) = &x.parallel {
                    let mut tape = Tape::new();
                    let bound = source.bind_frozen(&mut tape);
                    let f = input_feature(source, &mut tape, &bound, p)?;
                    by_pair.insert(x.pair_id, tape.value(f).clone());
                }
            }
        }
        Ok(Self { by_pair })
    }

    pub fn get(&self, pair_id: u64) -> Option<&Tensor> {
        self.by_pair.get(&pair_id)
    }

    pub fn len(&self) -> usize {
        self.by_pair.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_pair.is_empty()
    }
}

/// Builds `L_total` for a batch on `tape`, recording predictions in `tally`.
/// The alignment term covers instances whose source feature is in `source`
/// and is skipped entirely when λ = 0. The regulariser is present iff
/// `anchor` is given.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    model: &AdaptedModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&TaskInstance],
    weights: &LossWeights,
    source: &SourceFeatures,
    anchor: Option<(&FreezePlan, &ThetaSnapshot)>,
    tally: &mut Tally,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let kind = model.kind();
    let mut features = Vec::with_capacity(batch.len());
    let task = match kind {
        TaskKind::Pair => {
            let mut stacked: Option<Var> = None;
            let mut labels = Vec::with_capacity(batch.len());
            for x in batch {
                let gold = match x.label {
                    Label::Class(c) => c,
                    other => return Err(Error::Label(format!("{other:?} in a pair batch"))),
                };
                let b = x
                    .tokens_b
                    .as_deref()
                    .ok_or_else(|| Error::Contract("pair instance without tokens_b".into()))?;
                let (logits, feat) = model.forward_pair(tape, bound, &x.tokens, b)?;
                tally.add_class(argmax(tape.value(logits).data()), gold);
                features.push(feat);
                labels.push(gold);
                stacked = Some(match stacked {
                    Some(s) => tape.concat_rows(s, logits)?,
                    None => logits,
                });
            }
            task_loss(tape, stacked.expect("non-empty batch"), &labels)?
        }
        TaskKind::Span => {
            let mut logits = Vec::with_capacity(batch.len());
            let mut spans = Vec::with_capacity(batch.len());
            for x in batch {
                let gold = match x.label {
                    Label::Span(s, e) => (s, e),
                    other => return Err(Error::Label(format!("{other:?} in a span batch"))),
                };
                let (s, e, feat) = model.forward_span(tape, bound, &x.tokens)?;
                tally.add_span(predict_span(tape.value(s).data(), tape.value(e).data()), gold);
                features.push(feat);
                logits.push((s, e));
                spans.push(gold);
            }
            span_task_loss(tape, &logits, &spans)?
        }
    };

    let align = if weights.lambda > 0.0 {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for (x, &f) in batch.iter().zip(&features) {
            if let Some(fs) = source.get(x.pair_id) {
                src.push(tape.constant(fs.clone()));
                tgt.push(f);
            }
        }
        alignment_loss(tape, &src, &tgt)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let reg = match anchor {
        Some((plan, snapshot)) => sp_regularizer(tape, bound, plan, snapshot)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    total_loss(tape, task, align, reg, weights)
}

/// Forward, backward and masked update for one batch.
fn train_step(
    model: &mut AdaptedModel,
    plan: &FreezePlan,
    opt: &mut OptimizerState,
    batch: &[&TaskInstance],
    weights: &LossWeights,
    source: &SourceFeatures,
    snapshot: Option<&ThetaSnapshot>,
    tally: &mut Tally,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |n| plan.contains(n));
    let anchor = snapshot.map(|s| (plan, s));
    let (total, breakdown) = batch_objective(model, &mut tape, &bound, batch, weights, source, anchor, tally)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical {
            context: "training step".into(),
            detail: format!("non-finite loss {breakdown:?}"),
        });
    }
    tape.backward(total)?;
    for name in plan.names() {
        let var = bound.get(name)?;
        let p = model.params_mut().get_mut(name)?;
        match tape.grad(var) {
            Some(g) => p.accumulate_grad(g)?,
            // Bound but not on the loss path: its gradient is zero.
            None => {
                let zeros = vec![0.0; p.numel()];
                p.accumulate_grad(&zeros)?;
            }
        }
    }
    apply_gradients_masked(model, plan, opt)?;
    Ok(breakdown)
}

/// Metrics plus the full loss decomposition over a split.
pub fn evaluate_objective(
    model: &AdaptedModel,
    split: &[TaskInstance],
    weights: &LossWeights,
    source: &SourceFeatures,
    plan: &FreezePlan,
    snapshot: &ThetaSnapshot,
) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::Contract("evaluate on an empty split".into()));
    }
    let mut tally = Tally::default();
    let mut task = 0.0;
    let mut align = 0.0;
    let mut aligned = 0usize;
    let mut reg = 0.0;
    for chunk in split.chunks(32) {
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let batch: Vec<&TaskInstance> = chunk.iter().collect();
        let (_, b) = batch_objective(model, &mut tape, &bound, &batch, weights, source, Some((plan, snapshot)), &mut tally)?;
        let pairs = if weights.lambda > 0.0 {
            chunk.iter().filter(|x| source.get(x.pair_id).is_some()).count()
        } else {
            0
        };
        task += b.task * chunk.len() as f64;
        align += b.align * pairs as f64;
        aligned += pairs;
        reg = b.reg;
    }
    let mut loss = LossBreakdown {
        task: task / split.len() as f64,
        align: if aligned > 0 { align / aligned as f64 } else { 0.0 },
        reg,
        total: 0.0,
    };
    loss.total = loss.recombine(weights);
    Ok(tally.finish(model.kind(), loss))
}

pub fn train(config: &RunConfig) -> Result<RunOutcome> {
    train_with_cache(config, &mut SourceModelCache::new())
}

pub fn train_with_cache(config: &RunConfig, cache: &mut SourceModelCache) -> Result<RunOutcome> {
    config.validate()?;
    let data = config.generate_corpus()?;
    let source = cache.get_or_pretrain(config, &data)?;
    transfer(config, &data, source)
}

/// Adapts a source model to the target split.
pub fn transfer(config: &RunConfig, data: &Dataset, source_model: AdaptedModel) -> Result<RunOutcome> {
    let kind = config.data.kind;
    let streams = config.streams();
    let source = if config.loss.lambda > 0.0 {
        SourceFeatures::compute(
            &source_model,
            [&data.target_train[..], &data.target_dev[..], &data.target_test[..]],
        )?
    } else {
        SourceFeatures::default()
    };
    let mut model = source_model;
    attach_modules(&mut model, config)?;
    let plan = make_freeze_plan(&model, config.peft.freeze)?;
    if plan.is_empty() {
        return Err(Error::Config("freeze plan selects no parameters".into()));
    }
    let train_set = synthesize_pseudo(&data.target_train, &config.augment_plan(), &data.generator, &data.language)?;
    let snapshot = ThetaSnapshot::capture(&model, &plan)?;
    let initial = model.clone();
    let mut opt = OptimizerState::new(&model, &plan, config.hyper(config.transfer_lr()))?;
    let weights = config.loss;

    let mut trace = vec![TraceRow {
        epoch: 0,
        split: Split::Dev,
        metrics: evaluate_objective(&model, &data.target_dev, &weights, &source, &plan, &snapshot)?,
    }];

    let mut order_rng = streams.rng("order");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.train.epochs {
        order.shuffle(&mut order_rng);
        let mut tally = Tally::default();
        let mut losses = Vec::new();
        for idx in order.chunks(config.train.batch_size) {
            step += 1;
            let batch: Vec<&TaskInstance> = idx.iter().map(|&i| &train_set[i]).collect();
            let b = train_step(&mut model, &plan, &mut opt, &batch, &weights, &source, Some(&snapshot), &mut tally)
                .map_err(|e| with_step_context(e, "transfer", step, epoch))?;
            losses.push(b);
        }
        let mut loss = LossBreakdown::mean(&losses);
        loss.total = loss.recombine(&weights);
        trace.push(TraceRow {
            epoch,
            split: Split::Train,
            metrics: tally.finish(kind, loss),
        });
        let dev = evaluate_objective(&model, &data.target_dev, &weights, &source, &plan, &snapshot)?;
        log::debug!("epoch {epoch}: dev {:.3} loss {:.4}", dev.primary(kind), dev.loss.total);
        trace.push(TraceRow {
            epoch,
            split: Split::Dev,
            metrics: dev,
        });
    }
    trace.push(TraceRow {
        epoch: config.train.epochs,
        split: Split::Test,
        metrics: evaluate_objective(&model, &data.target_test, &weights, &source, &plan, &snapshot)?,
    });

    Ok(RunOutcome {
        config: config.clone(),
        model,
        plan,
        snapshot,
        initial,
        trace,
        train_size: train_set.len(),
    })
}
