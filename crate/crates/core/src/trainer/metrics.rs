use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TaskInstance};
use crate::error::{Error, Result};
use crate::model::{argmax, predict_span, AdaptedModel, TaskKind};
use crate::objective::LossBreakdown;
use crate::tensor::Tape;

/// Evaluation summary. For the pair task `accuracy` is label accuracy,
/// `em` equals it and `f1` is the positive-class F1. For the span task `em`
/// is exact span match, `f1` the mean token-overlap F1 and `accuracy`
/// equals `em`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub em: f64,
    pub loss: LossBreakdown,
}

impl Metrics {
    /// The headline number of a task: accuracy for pairs, F1 for spans.
    pub fn primary(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Pair => self.accuracy,
            TaskKind::Span => self.f1,
        }
    }
}

/// Token-overlap F1 between two inclusive spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Running tally of predictions against gold labels.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    n: usize,
    correct: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
    f1_sum: f64,
}

impl Tally {
    pub fn add_class(&mut self, pred: usize, gold: usize) {
        self.n += 1;
        if pred == gold {
            self.correct += 1;
        }
        match (pred, gold) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => {}
        }
    }

    pub fn add_span(&mut self, pred: (usize, usize), gold: (usize, usize)) {
        self.n += 1;
        if pred == gold {
            self.correct += 1;
        }
        self.f1_sum += span_f1(pred, gold);
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self, kind: TaskKind, loss: LossBreakdown) -> Metrics {
        let n = self.n.max(1) as f64;
        let exact = self.correct as f64 / n;
        match kind {
            TaskKind::Pair => {
                let denom = 2 * self.tp + self.fp + self.fn_;
                let f1 = if denom == 0 {
                    0.0
                } else {
                    2.0 * self.tp as f64 / denom as f64
                };
                Metrics {
                    accuracy: exact,
                    f1,
                    em: exact,
                    loss,
                }
            }
            TaskKind::Span => Metrics {
                accuracy: exact,
                f1: self.f1_sum / n,
                em: exact,
                loss,
            },
        }
    }
}

/// Examples per evaluation tape.
const EVAL_CHUNK: usize = 32;

/// Untracked accuracy / EM / F1 and mean task loss over a split.
pub fn evaluate(model: &AdaptedModel, split: &[TaskInstance], kind: TaskKind) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::Contract("evaluate on an empty split".into()));
    }
    let mut tally = Tally::default();
    let mut loss_sum = 0.0;
    for chunk in split.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        for x in chunk {
            match (kind, x.label) {
                (TaskKind::Pair, Label::Class(gold)) => {
                    let b = x
                        .tokens_b
                        .as_deref()
                        .ok_or_else(|| Error::Contract("pair instance without tokens_b".into()))?;
                    let (logits, _) = model.forward_pair(&mut tape, &bound, &x.tokens, b)?;
                    let l = tape.cross_entropy_logits(logits, &[gold])?;
                    loss_sum += tape.value(l).item()?;
                    tally.add_class(argmax(tape.value(logits).data()), gold);
                }
                (TaskKind::Span, Label::Span(gs, ge)) => {
                    let (s, e, _) = model.forward_span(&mut tape, &bound, &x.tokens)?;
                    let ls = tape.cross_entropy_logits(s, &[gs])?;
                    let le = tape.cross_entropy_logits(e, &[ge])?;
                    loss_sum += 0.5 * (tape.value(ls).item()? + tape.value(le).item()?);
                    let pred = predict_span(tape.value(s).data(), tape.value(e).data());
                    tally.add_span(pred, (gs, ge));
                }
                _ => {
                    return Err(Error::Label(format!(
                        "instance label {:?} does not fit a {kind} task",
                        x.label
                    )))
                }
            }
        }
    }
    let task = loss_sum / split.len() as f64;
    Ok(tally.finish(
        kind,
        LossBreakdown {
            task,
            align: 0.0,
            reg: 0.0,
            total: task,
        },
    ))
}
