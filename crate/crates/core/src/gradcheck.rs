//! Central finite differences against the tape on the full objective.

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::corpus::TaskInstance;
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, TransformerConfig};
use crate::objective::ThetaSnapshot;
use crate::peft::{make_freeze_plan, FreezeMode, FreezePlan};
use crate::tensor::{OpKind, Tape};
use crate::trainer::{attach_modules, batch_objective, RunConfig, SourceFeatures, Tally};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is essentially zero are judged on absolute error.
pub const DENOM_FLOOR: f64 = 1e-6;
/// A failing element is attributed to a kink when halving the step moves the
/// estimate by at least this fraction of its disagreement with the tape.
pub const KINK_FRACTION: f64 = 0.25;
/// Largest model width the checker accepts.
pub const MAX_DIM: usize = 16;

/// Spread of the perturbation applied to every checked parameter, so that
/// `θ ≠ θ₀` and LoRA `B ≠ 0`.
const PERTURB_STD: f64 = 0.05;
const BATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Elements skipped because a ReLU kink lies within the step.
    pub kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_error < self.tolerance))
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }

    /// Checked scalar count.
    pub fn elements(&self) -> usize {
        self.params.iter().map(|p| p.elements).sum()
    }

    /// Numerical error naming the offending parameters, if any.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let names: Vec<&str> = self.failures().map(|p| p.name.as_str()).collect();
        Err(Error::Numerical {
            context: "gradcheck".into(),
            detail: format!(
                "max relative error {:.3e} >= {:.0e} in {}",
                self.max_rel_error,
                self.tolerance,
                names.join(", ")
            ),
        })
    }
}

/// Small configuration with every adaptation module attached and the whole
/// model trainable.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = TransformerConfig {
        vocab_size: 16,
        model_dim: 8,
        heads: 2,
        layers: 1,
        ff_dim: 16,
        max_seq_len: 32,
    };
    c.peft.prompt_len = 2;
    c.peft.lora_rank = 2;
    c.peft.adapter_bottleneck = 3;
    c.peft.freeze = FreezeMode::Full;
    c.data.source_train = 40;
    c.data.target_train = 4;
    c.data.target_dev = 4;
    c.data.target_test = 4;
    c
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks every element of every parameter in the configured freeze plan.
/// `fault` scales one op's backward rule, to confirm the checker notices.
pub fn gradcheck(config: &RunConfig, fault: Option<(OpKind, f64)>) -> Result<GradcheckReport> {
    config.validate()?;
    if config.model.model_dim > MAX_DIM {
        return Err(Error::Config(format!(
            "gradcheck needs model_dim <= {MAX_DIM}, got {}",
            config.model.model_dim
        )));
    }
    let data = config.generate_corpus()?;
    let streams = config.streams();
    let mut model = AdaptedModel::new(config.model.clone(), config.data.kind, &mut streams.rng("init"))?;
    let source = SourceFeatures::compute(&model, [&data.target_train[..BATCH]])?;
    attach_modules(&mut model, config)?;
    let plan = make_freeze_plan(&model, config.peft.freeze)?;
    let snapshot = ThetaSnapshot::capture(&model, &plan)?;

    let noise = Normal::new(0.0, PERTURB_STD).expect("valid std");
    let mut rng = streams.rng("gradcheck");
    for name in plan.names() {
        for v in model.params_mut().get_mut(name)?.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let batch: Vec<&TaskInstance> = data.target_train.iter().take(BATCH).collect();
    let weights = config.loss;
    let loss_at = |m: &AdaptedModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind_frozen(&mut tape);
        let (_, b) = batch_objective(m, &mut tape, &bound, &batch, &weights, &source, Some((&plan, &snapshot)), &mut Tally::default())?;
        Ok(b.total)
    };

    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_gradient_fault(kind, factor);
    }
    let bound = model.bind(&mut tape, |n| plan.contains(n));
    let (total, _) = batch_objective(&model, &mut tape, &bound, &batch, &weights, &source, Some((&plan, &snapshot)), &mut Tally::default())?;
    tape.backward(total)?;

    let mut params = Vec::with_capacity(plan.len());
    let names: Vec<String> = plan.names().map(str::to_string).collect();
    for name in &names {
        let numel = model.param(name)?.numel();
        let analytic = tape
            .grad(bound.get(name)?)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut check = ParamCheck {
            name: name.clone(),
            elements: numel,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            kinks: 0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let mut central = |h: f64| -> Result<f64> {
                let orig = model.param(name)?.data()[i];
                model.params_mut().get_mut(name)?.data_mut()[i] = orig + h;
                let up = loss_at(&model)?;
                model.params_mut().get_mut(name)?.data_mut()[i] = orig - h;
                let down = loss_at(&model)?;
                model.params_mut().get_mut(name)?.data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = central(STEP)?;
            let mut rel = relative_error(a, numeric);
            if rel.is_nan() {
                rel = f64::INFINITY;
            }
            // A smooth loss gives the same central difference at h and h/2
            // up to O(h²), so a wrong backward rule survives halving the
            // step. A kink inside the step does not.
            if rel >= TOLERANCE && (numeric - central(STEP / 2.0)?).abs() > KINK_FRACTION * (a - numeric).abs() {
                check.kinks += 1;
                continue;
            }
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        params.push(check);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        params,
        max_rel_error,
        tolerance: TOLERANCE,
    })
}

/// Plan used by [`gradcheck`] for a configuration, for reporting.
pub fn checked_plan(config: &RunConfig) -> Result<FreezePlan> {
    let mut model = AdaptedModel::new(config.model.clone(), config.data.kind, &mut config.streams().rng("init"))?;
    attach_modules(&mut model, config)?;
    make_freeze_plan(&model, config.peft.freeze)
}
