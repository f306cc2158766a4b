//! Adaptation channel: soft prompt, LoRA and bottleneck adapters, plus the
//! freeze plan that decides which parameters train.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_head_param, AdaptedModel, LoraAdapter};
use crate::tensor::{self, Tape, Tensor, Var};

pub const PROMPT_PARAM: &str = "prompt.embed";
/// Standard deviation of the LoRA `A` initialisation.
pub const LORA_INIT_STD: f64 = 0.02;
pub const ADAPTER_INIT_STD: f64 = 0.02;

pub fn adapter_down_name(block: usize) -> String {
    format!("adapter.{block}.down")
}

pub fn adapter_up_name(block: usize) -> String {
    format!("adapter.{block}.up")
}

fn is_adapter_param(name: &str) -> bool {
    name.starts_with("lora.") || name.starts_with("adapter.")
}

/// `[P; E(x)]`: prompt rows first, then the embedded input.
pub fn prepend_prompt(tape: &mut Tape, prompt: Var, embedded: Var) -> Result<Var> {
    let (pd, ed) = (tape.value(prompt).cols(), tape.value(embedded).cols());
    if pd != ed {
        return Err(Error::Dimension(format!(
            "prompt width {pd} does not match embedding width {ed}"
        )));
    }
    tape.concat_rows(prompt, embedded)
}

/// Soft prompt view over the registry entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    pub matrix: Tensor,
}

impl SoftPrompt {
    pub fn new(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        Ok(Self { matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Attaches a `k×d` soft prompt initialised from `k` distinct, randomly
/// chosen rows of the token-embedding table.
pub fn attach_prompt<R: Rng + ?Sized>(model: &mut AdaptedModel, k: usize, rng: &mut R) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("prompt length must be >= 1".into()));
    }
    let table = model.param("embed.token")?;
    let (v, d) = table.dims2()?;
    let rows = sample(rng, v - 2, k.min(v - 2)).into_vec();
    let mut data = Vec::with_capacity(k * d);
    for i in 0..k {
        data.extend_from_slice(table.row(rows[i % rows.len()]));
    }
    let prompt = Tensor::matrix(k, d, data)?;
    model.params_mut().insert(PROMPT_PARAM, prompt);
    model.prompt_len = Some(k);
    Ok(())
}

pub fn soft_prompt(model: &AdaptedModel) -> Option<SoftPrompt> {
    model
        .param(PROMPT_PARAM)
        .ok()
        .map(|m| SoftPrompt { matrix: m.clone() })
}

/// Expands short target names (`attn.wq`) to every block's full weight name.
pub fn expand_targets(model: &AdaptedModel, targets: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for t in targets {
        if t.starts_with("block.") || model.params().contains(t) {
            out.push(t.clone());
        } else {
            out.extend((0..model.config().layers).map(|b| format!("block.{b}.{t}")));
        }
    }
    out
}

/// Wraps each target weight `W` (stored `out × in`) so its layer computes
/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ`, with `A ~ N(0, 0.02²)` and `B = 0`.
pub fn attach_lora<R: Rng + ?Sized>(
    model: &mut AdaptedModel,
    rank: usize,
    alpha: f64,
    targets: &[String],
    rng: &mut R,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
    }
    // Validate everything before mutating.
    let mut shapes = Vec::with_capacity(targets.len());
    for t in targets {
        let w = model.param(t)?;
        let (out_dim, in_dim) = w.dims2().map_err(|_| {
            Error::Dimension(format!("LoRA target `{t}` has shape {:?}, not 2-D", w.shape()))
        })?;
        let is_linear = t.starts_with("block.") && t.rsplit('.').next().is_some_and(|s| s.starts_with('w'));
        if !is_linear {
            return Err(Error::Config(format!(
                "LoRA target `{t}` is not a linear weight inside an encoder block"
            )));
        }
        shapes.push((t.clone(), out_dim, in_dim));
    }
    for (target, out_dim, in_dim) in shapes {
        let adapter = LoraAdapter {
            target: target.clone(),
            rank,
            alpha,
        };
        model
            .params_mut()
            .insert(adapter.a_name(), Tensor::randn(&[rank, in_dim], LORA_INIT_STD, rng));
        model
            .params_mut()
            .insert(adapter.b_name(), Tensor::zeros(&[out_dim, rank]));
        model.lora.insert(target, adapter);
    }
    Ok(())
}

/// Folds every LoRA delta into its base weight and removes the adapters.
/// Returns how many adapters were merged; zero means nothing was attached.
pub fn merge_lora(model: &mut AdaptedModel) -> Result<usize> {
    if model.lora.is_empty() {
        log::warn!("merge_lora called on a model with no LoRA adapters");
        return Ok(0);
    }
    let adapters: Vec<LoraAdapter> = model.lora.values().cloned().collect();
    for adapter in &adapters {
        let a = model.param(&adapter.a_name())?.clone();
        let b = model.param(&adapter.b_name())?.clone();
        let delta = tensor::matmul(&b, &a)?;
        let scale = adapter.scaling();
        let w = model.params_mut().get_mut(&adapter.target)?;
        if w.shape() != delta.shape() {
            return Err(Error::Dimension(format!(
                "merged delta {:?} does not match weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += scale * dv;
        }
        model.params_mut().remove(&adapter.a_name());
        model.params_mut().remove(&adapter.b_name());
    }
    model.lora.clear();
    Ok(adapters.len())
}

/// Inserts `h + relu(h·W_down)·W_up` after every block's feed-forward, with
/// `W_down` (`d×m`) random and `W_up` (`m×d`) zero.
pub fn attach_adapter<R: Rng + ?Sized>(model: &mut AdaptedModel, bottleneck: usize, rng: &mut R) -> Result<()> {
    let d = model.config().model_dim;
    if bottleneck == 0 || bottleneck >= d {
        return Err(Error::Config(format!(
            "adapter bottleneck must satisfy 0 < m < d = {d}, got {bottleneck}"
        )));
    }
    for b in 0..model.config().layers {
        model
            .params_mut()
            .insert(adapter_down_name(b), Tensor::randn(&[d, bottleneck], ADAPTER_INIT_STD, rng));
        model
            .params_mut()
            .insert(adapter_up_name(b), Tensor::zeros(&[bottleneck, d]));
    }
    model.adapter_dim = Some(bottleneck);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    HeadOnly,
    AdaptersOnly,
    AdaptersPlusPrompt,
    Full,
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeMode::HeadOnly => "head_only",
            FreezeMode::AdaptersOnly => "adapters_only",
            FreezeMode::AdaptersPlusPrompt => "adapters_plus_prompt",
            FreezeMode::Full => "full",
        })
    }
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_only" => Ok(Self::HeadOnly),
            "adapters_only" => Ok(Self::AdaptersOnly),
            "adapters_plus_prompt" => Ok(Self::AdaptersPlusPrompt),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown freeze mode `{other}`"))),
        }
    }
}

/// The exact set of parameter names that receive updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezePlan {
    names: BTreeSet<String>,
}

impl FreezePlan {
    /// A plan from explicit names, each of which must exist in the model.
    pub fn from_names<I, S>(model: &AdaptedModel, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for n in names {
            let n = n.into();
            model.param(&n)?;
            set.insert(n);
        }
        Ok(Self { names: set })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Newline-separated sorted names, with a trailing newline.
    pub fn to_manifest(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn from_manifest(model: &AdaptedModel, text: &str) -> Result<Self> {
        Self::from_names(model, text.lines().filter(|l| !l.is_empty()))
    }
}

pub fn make_freeze_plan(model: &AdaptedModel, mode: FreezeMode) -> Result<FreezePlan> {
    let names = model.params().names();
    let has_adapters = model.has_lora() || model.adapter_dim().is_some();
    let selected: Vec<&str> = match mode {
        FreezeMode::Full => names.collect(),
        FreezeMode::HeadOnly => names.filter(|n| is_head_param(n)).collect(),
        FreezeMode::AdaptersOnly => {
            if !has_adapters {
                return Err(Error::Config(
                    "adapters_only requested but no LoRA or bottleneck adapter is attached".into(),
                ));
            }
            names
                .filter(|n| is_adapter_param(n) || is_head_param(n))
                .collect()
        }
        FreezeMode::AdaptersPlusPrompt => {
            if !has_adapters {
                return Err(Error::Config(
                    "adapters_plus_prompt requested but no LoRA or bottleneck adapter is attached"
                        .into(),
                ));
            }
            if model.prompt_len().is_none() {
                return Err(Error::Config(
                    "adapters_plus_prompt requested but no soft prompt is attached".into(),
                ));
            }
            names
                .filter(|n| is_adapter_param(n) || is_head_param(n) || *n == PROMPT_PARAM)
                .collect()
        }
    };
    FreezePlan::from_names(model, selected)
}

/// Total number of scalar values covered by the plan.
pub fn count_trainable(model: &AdaptedModel, plan: &FreezePlan) -> usize {
    plan.names()
        .filter_map(|n| model.param(n).ok())
        .map(Tensor::numel)
        .sum()
}
