use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::peft::FreezePlan;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam moments for the members of one freeze plan.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &AdaptedModel, plan: &FreezePlan, hyper: AdamHyper) -> Result<Self> {
        let mut first = BTreeMap::new();
        for name in plan.names() {
            first.insert(name.to_string(), vec![0.0; model.param(name)?.numel()]);
        }
        let second = first.clone();
        Ok(Self {
            hyper,
            step: 0,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }
}

/// One Adam update restricted to `plan`, after optional global-norm
/// clipping. Every parameter's gradient buffer is cleared afterwards.
/// Returns the pre-clip gradient norm.
pub fn apply_gradients_masked(
    model: &mut AdaptedModel,
    plan: &FreezePlan,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut sq = 0.0;
    for name in plan.names() {
        let g = model
            .param(name)?
            .grad()
            .ok_or_else(|| Error::Contract(format!("no gradient for trainable `{name}`")))?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical {
            context: format!("optimizer step {}", opt.step + 1),
            detail: "non-finite gradient norm".into(),
        });
    }
    let clip = match opt.hyper.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    opt.step += 1;
    let AdamHyper { lr, b1, b2, eps, .. } = opt.hyper;
    let t = opt.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for name in plan.names() {
        let m = opt
            .first
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("optimizer has no state for `{name}`")))?;
        let v = opt.second.get_mut(name).expect("moments are created together");
        let p = model.params_mut().get_mut(name)?;
        let g: Vec<f64> = p.grad().expect("checked above").to_vec();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    zero_grad(model);
    Ok(norm)
}

pub fn zero_grad(model: &mut AdaptedModel) {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for n in names {
        if let Ok(p) = model.params_mut().get_mut(&n) {
            p.zero_grad();
        }
    }
}
