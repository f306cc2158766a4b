//! Composite training objective:
//! `L_total = L_task + λ·L_align + β·‖θ − θ₀‖²`.
//!
//! Task and alignment terms are batch means, so λ and β do not depend on
//! batch size. The regulariser runs over the trainable plan only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdaptedModel, Bound, Feature};
use crate::peft::FreezePlan;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        let w = Self { lambda, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Copy of the trainable parameters at transfer start.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaSnapshot {
    values: BTreeMap<String, Tensor>,
}

impl ThetaSnapshot {
    pub fn capture(model: &AdaptedModel, plan: &FreezePlan) -> Result<Self> {
        let values = plan
            .names()
            .map(|n| Ok((n.to_string(), model.param(n)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }

    pub fn from_map(values: BTreeMap<String, Tensor>) -> Self {
        Self { values }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Snapshot(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub align: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `task + λ·align + β·reg`, evaluated in the same order as the tape.
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        let mut t = self.task;
        if weights.lambda != 0.0 {
            t += weights.lambda * self.align;
        }
        if weights.beta != 0.0 {
            t += weights.beta * self.reg;
        }
        t
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            task: sum(|b| b.task),
            align: sum(|b| b.align),
            reg: sum(|b| b.reg),
            total: sum(|b| b.total),
        }
    }
}

/// Mean cross-entropy of stacked `B×C` logits.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy_logits(logits, labels)
}

/// Mean over examples of `(CE(start) + CE(end)) / 2`.
pub fn span_task_loss(
    tape: &mut Tape,
    logits: &[(Var, Var)],
    spans: &[(usize, usize)],
) -> Result<Var> {
    if logits.len() != spans.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "{} span logit pairs for {} gold spans",
            logits.len(),
            spans.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&(s, e), &(gs, ge)) in logits.iter().zip(spans) {
        let ls = tape.cross_entropy_logits(s, &[gs])?;
        let le = tape.cross_entropy_logits(e, &[ge])?;
        let pair = tape.add(ls, le)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, pair)?,
            None => pair,
        });
    }
    let sum = acc.expect("non-empty");
    Ok(tape.scale(sum, 0.5 / logits.len() as f64))
}

/// Mean over parallel pairs of `‖f_s − f_t‖²`. Features are `1×d` rows.
/// Returns a constant zero when there are no pairs.
pub fn alignment_loss(tape: &mut Tape, source: &[Var], target: &[Var]) -> Result<Var> {
    if source.len() != target.len() {
        return Err(Error::Contract(format!(
            "{} source features for {} target features",
            source.len(),
            target.len()
        )));
    }
    if source.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stack = |tape: &mut Tape, rows: &[Var]| -> Result<Var> {
        let mut acc = rows[0];
        for &r in &rows[1..] {
            acc = tape.concat_rows(acc, r)?;
        }
        Ok(acc)
    };
    let s = stack(tape, source)?;
    let t = stack(tape, target)?;
    let diff = tape.sub(s, t)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / source.len() as f64))
}

/// Untracked `‖a − b‖²` between two features.
pub fn alignment_distance(a: &Feature, b: &Feature) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "alignment between features of width {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// `Σ_{θ ∈ plan} ‖θ − θ₀‖²` on the tape.
pub fn sp_regularizer(
    tape: &mut Tape,
    bound: &Bound,
    plan: &FreezePlan,
    snapshot: &ThetaSnapshot,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for name in plan.names() {
        let anchor = tape.constant(snapshot.get(name)?.clone());
        let diff = tape.sub(bound.get(name)?, anchor)?;
        let sq = tape.sum_squares(diff);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Untracked regulariser value over any set of names.
pub fn sp_regularizer_value<'a>(
    model: &AdaptedModel,
    names: impl IntoIterator<Item = &'a str>,
    snapshot: &ThetaSnapshot,
) -> Result<f64> {
    let mut total = 0.0;
    for name in names {
        let anchor = snapshot.get(name)?;
        let cur = model.param(name)?;
        total += cur
            .data()
            .iter()
            .zip(anchor.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Weighted sum of the three terms. A zero weight drops its term from the
/// graph, so `(0, 0)` returns the task loss node itself.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    align: Var,
    reg: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    for v in [task, align, reg] {
        if tape.value(v).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss component of shape {:?} is not scalar",
                tape.value(v).shape()
            )));
        }
    }
    let mut total = task;
    if weights.lambda != 0.0 {
        let a = tape.scale(align, weights.lambda);
        total = tape.add(total, a)?;
    }
    if weights.beta != 0.0 {
        let r = tape.scale(reg, weights.beta);
        total = tape.add(total, r)?;
    }
    let breakdown = LossBreakdown {
        task: tape.value(task).item()?,
        align: tape.value(align).item()?,
        reg: tape.value(reg).item()?,
        total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v).with_requires_grad(true))
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_ok());
        assert!(matches!(LossWeights::new(-0.1, 0.0), Err(Error::Config(_))));
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let (t, a, r) = (scalar(&mut tape, 1.0), scalar(&mut tape, 2.0), scalar(&mut tape, 3.0));
        let w = LossWeights::new(0.5, 0.1).unwrap();
        let (total, b) = total_loss(&mut tape, t, a, r, &w).unwrap();
        assert!((tape.value(total).item().unwrap() - 2.3).abs() < 1e-15);
        assert!((b.total - b.recombine(&w)).abs() <= 1e-9 * b.total.abs());

        let (total0, b0) = total_loss(&mut tape, t, a, r, &LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(total0, t);
        assert_eq!(b0.total, b0.task);
        assert!(total_loss(&mut tape, t, a, r, &LossWeights { lambda: -1.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn alignment_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[0.0, 1.0]]).unwrap());
        let l = alignment_loss(&mut tape, &[a], &[b]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0);
        let same = alignment_loss(&mut tape, &[a], &[a]).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let none = alignment_loss(&mut tape, &[], &[]).unwrap();
        assert_eq!(tape.value(none).item().unwrap(), 0.0);
        let wide = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(alignment_loss(&mut tape, &[a], &[wide]).is_err());

        let f = Feature::new(vec![1.0, 0.0], 2).unwrap();
        let g = Feature::new(vec![0.0, 1.0], 2).unwrap();
        assert_eq!(alignment_distance(&f, &g).unwrap(), 2.0);
        let h = Feature::new(vec![0.0; 3], 3).unwrap();
        assert!(matches!(alignment_distance(&f, &h), Err(Error::Dimension(_))));
    }

    #[test]
    fn span_loss_is_mean_of_start_and_end() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[1, 4]));
        let e = tape.constant(Tensor::zeros(&[1, 4]));
        let l = span_task_loss(&mut tape, &[(s, e)], &[(0, 3)]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            span_task_loss(&mut tape, &[(s, e)], &[(0, 4)]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn breakdown_mean() {
        let a = LossBreakdown { task: 1.0, align: 2.0, reg: 3.0, total: 4.0 };
        let b = LossBreakdown { task: 3.0, align: 4.0, reg: 5.0, total: 6.0 };
        assert_eq!(
            LossBreakdown::mean(&[a, b]),
            LossBreakdown { task: 2.0, align: 3.0, reg: 4.0, total: 5.0 }
        );
    }
}
