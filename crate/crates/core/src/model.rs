//! Tiny pre-layer-norm transformer encoder with learned absolute positions,
//! a mean-pooling feature map and the two task heads.
//!
//! All parameters of an [`AdaptedModel`] live in one name-sorted registry.
//! Forward passes run on a [`Tape`] against a [`Bound`] view of that
//! registry, so the same code serves training, evaluation and gradient
//! checking.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive attention bias for padded key positions.
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 32,
            heads: 4,
            layers: 2,
            ff_dim: 64,
            max_seq_len: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must leave room for PAD, SEP and content tokens".into(),
            ));
        }
        Ok(())
    }

    /// Reserved padding token, masked out of attention and pooling.
    pub fn pad_id(&self) -> usize {
        self.vocab_size - 2
    }

    /// Reserved separator joining the two halves of a pair input.
    pub fn sep_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Sentence-pair classification (paraphrase / not).
    Pair,
    /// Extractive span selection.
    Span,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Pair => "pair",
            TaskKind::Span => "span",
        })
    }
}

/// A pooled representation in the shared feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature(Vec<f64>);

impl Feature {
    pub fn new(values: Vec<f64>, dim: usize) -> Result<Self> {
        if values.len() != dim {
            return Err(Error::Dimension(format!(
                "feature of width {} where {dim} was expected",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Mean over the rows of a hidden-state matrix.
pub fn pool(hidden: &Tensor) -> Result<Feature> {
    let (n, d) = hidden.dims2()?;
    if n == 0 {
        return Err(Error::Contract("pool of an empty sequence".into()));
    }
    let mut acc = vec![0.0; d];
    for r in 0..n {
        acc.iter_mut().zip(hidden.row(r)).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Feature::new(acc, d)
}

/// Name-sorted parameter registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Metadata of a LoRA adapter wrapping one weight; `A` and `B` live in the
/// registry under `lora.<target>.a` and `lora.<target>.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("lora.{}.a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.b", self.target)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Backbone plus attached adaptation modules and a task head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    config: TransformerConfig,
    kind: TaskKind,
    params: ParamStore,
    pub(crate) lora: BTreeMap<String, LoraAdapter>,
    pub(crate) prompt_len: Option<usize>,
    pub(crate) adapter_dim: Option<usize>,
}

/// Token embeddings are scaled so random rows are distinguishable after layer norm.
pub const TOKEN_EMBED_STD: f64 = 1.0;
pub const POSITION_EMBED_STD: f64 = 0.1;
pub const HEAD_INIT_STD: f64 = 0.02;

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("block.")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

impl AdaptedModel {
    /// Fresh randomly initialised backbone and head; no adaptation modules.
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, kind: TaskKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut params = ParamStore::new();
        params.insert(
            "embed.token",
            Tensor::randn(&[config.vocab_size, d], TOKEN_EMBED_STD, rng),
        );
        params.insert(
            "embed.pos",
            Tensor::randn(&[config.max_seq_len, d], POSITION_EMBED_STD, rng),
        );
        let linear_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        for b in 0..config.layers {
            let p = |s: &str| format!("block.{b}.{s}");
            params.insert(p("ln1.gain"), Tensor::full(&[1, d], 1.0));
            params.insert(p("ln1.bias"), Tensor::zeros(&[1, d]));
            for w in ["q", "k", "v", "o"] {
                params.insert(p(&format!("attn.w{w}")), Tensor::randn(&[d, d], linear_std(d), rng));
                params.insert(p(&format!("attn.b{w}")), Tensor::zeros(&[1, d]));
            }
            params.insert(p("ln2.gain"), Tensor::full(&[1, d], 1.0));
            params.insert(p("ln2.bias"), Tensor::zeros(&[1, d]));
            params.insert(
                p("ff.w1"),
                Tensor::randn(&[config.ff_dim, d], linear_std(d), rng),
            );
            params.insert(p("ff.b1"), Tensor::zeros(&[1, config.ff_dim]));
            params.insert(
                p("ff.w2"),
                Tensor::randn(&[d, config.ff_dim], linear_std(config.ff_dim), rng),
            );
            params.insert(p("ff.b2"), Tensor::zeros(&[1, d]));
        }
        match kind {
            TaskKind::Pair => {
                params.insert("head.pair.weight", Tensor::randn(&[2, d], HEAD_INIT_STD, rng));
                params.insert("head.pair.bias", Tensor::zeros(&[1, 2]));
            }
            TaskKind::Span => {
                params.insert("head.span.start", Tensor::randn(&[1, d], HEAD_INIT_STD, rng));
                params.insert("head.span.end", Tensor::randn(&[1, d], HEAD_INIT_STD, rng));
            }
        }
        Ok(Self {
            config,
            kind,
            params,
            lora: BTreeMap::new(),
            prompt_len: None,
            adapter_dim: None,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    pub fn lora_adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.lora.values()
    }

    pub fn has_lora(&self) -> bool {
        !self.lora.is_empty()
    }

    pub fn prompt_len(&self) -> Option<usize> {
        self.prompt_len
    }

    pub fn adapter_dim(&self) -> Option<usize> {
        self.adapter_dim
    }

    /// Number of rows the prompt contributes to every encoded sequence.
    pub fn prompt_rows(&self) -> usize {
        self.prompt_len.unwrap_or(0)
    }

    /// Registers every parameter on the tape. Parameters for which
    /// `trainable` returns true are tracked for gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone().with_requires_grad(trainable(name)));
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds everything as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    fn check_tokens(&self, tokens: &[usize], prompt: bool) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let k = if prompt { self.prompt_rows() } else { 0 };
        if tokens.len() + k > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len() + k,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Hidden states for `tokens`, with the soft prompt prepended when one is
    /// attached and `use_prompt` is set. Output has `k + n` rows (prompt
    /// first) or `n` rows.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize], use_prompt: bool) -> Result<Var> {
        let use_prompt = use_prompt && self.prompt_len.is_some();
        self.check_tokens(tokens, use_prompt)?;
        let n = tokens.len();
        let emb = tape.embedding_lookup(bound.get("embed.token")?, tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(bound.get("embed.pos")?, &positions)?;
        let mut h = tape.add(emb, pos)?;
        let k = if use_prompt {
            h = crate::peft::prepend_prompt(tape, bound.get(crate::peft::PROMPT_PARAM)?, h)?;
            self.prompt_rows()
        } else {
            0
        };

        let pad = self.config.pad_id();
        let mask = if tokens.contains(&pad) {
            let total = k + n;
            let mut m = vec![0.0; total * total];
            for (j, &t) in tokens.iter().enumerate() {
                if t == pad {
                    for r in 0..total {
                        m[r * total + k + j] = MASK_BIAS;
                    }
                }
            }
            Some(tape.constant(Tensor::matrix(total, total, m)?))
        } else {
            None
        };

        for b in 0..self.config.layers {
            h = self.block(tape, bound, b, h, mask)?;
        }
        Ok(h)
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let y = tape.matmul_bt(x, bound.get(weight)?)?;
        let mut y = tape.add_row(y, bound.get(bias)?)?;
        if let Some(adapter) = self.lora.get(weight) {
            let down = tape.matmul_bt(x, bound.get(&adapter.a_name())?)?;
            let up = tape.matmul_bt(down, bound.get(&adapter.b_name())?)?;
            let delta = tape.scale(up, adapter.scaling());
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, b: usize, h: Var, mask: Option<Var>) -> Result<Var> {
        let p = |s: &str| format!("block.{b}.{s}");
        let a = tape.layer_norm(h, bound.get(&p("ln1.gain"))?, bound.get(&p("ln1.bias"))?)?;
        let q = self.linear(tape, bound, a, &p("attn.wq"), &p("attn.bq"))?;
        let k = self.linear(tape, bound, a, &p("attn.wk"), &p("attn.bk"))?;
        let v = self.linear(tape, bound, a, &p("attn.wv"), &p("attn.bv"))?;
        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let mut scores = tape.scale(scores, inv_sqrt);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let o = self.linear(tape, bound, merged, &p("attn.wo"), &p("attn.bo"))?;
        let h = tape.add(h, o)?;

        let f = tape.layer_norm(h, bound.get(&p("ln2.gain"))?, bound.get(&p("ln2.bias"))?)?;
        let f = self.linear(tape, bound, f, &p("ff.w1"), &p("ff.b1"))?;
        let f = tape.relu(f);
        let f = self.linear(tape, bound, f, &p("ff.w2"), &p("ff.b2"))?;
        let mut h = tape.add(h, f)?;

        if self.adapter_dim.is_some() {
            let down = tape.matmul(h, bound.get(&crate::peft::adapter_down_name(b))?)?;
            let down = tape.relu(down);
            let up = tape.matmul(down, bound.get(&crate::peft::adapter_up_name(b))?)?;
            h = tape.add(h, up)?;
        }
        Ok(h)
    }

    /// Row indices of the non-PAD content positions within an encoded sequence.
    fn content_rows(&self, tokens: &[usize], k: usize) -> Vec<usize> {
        let pad = self.config.pad_id();
        tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != pad)
            .map(|(i, _)| k + i)
            .collect()
    }

    /// Pooled feature of the content positions (prompt rows and PAD excluded).
    pub fn pool_var(&self, tape: &mut Tape, hidden: Var, tokens: &[usize], k: usize) -> Result<Var> {
        let rows = self.content_rows(tokens, k);
        if rows.is_empty() {
            return Err(Error::Contract("pool of a sequence with no content tokens".into()));
        }
        let content = tape.gather_rows(hidden, &rows)?;
        tape.mean_rows(content)
    }

    /// Feature `f(x)` of a single sequence in the shared space.
    pub fn feature(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        let h = self.encode(tape, bound, tokens, true)?;
        self.pool_var(tape, h, tokens, self.prompt_rows())
    }

    /// `[a; SEP; b]`.
    pub fn join_pair(&self, a: &[usize], b: &[usize]) -> Vec<usize> {
        let mut joined = Vec::with_capacity(a.len() + b.len() + 1);
        joined.extend_from_slice(a);
        joined.push(self.config.sep_id());
        joined.extend_from_slice(b);
        joined
    }

    /// Pair-classifier logits (`1×2`) and the pooled feature (`1×d`) of the joined input.
    pub fn forward_pair(&self, tape: &mut Tape, bound: &Bound, a: &[usize], b: &[usize]) -> Result<(Var, Var)> {
        self.expect_kind(TaskKind::Pair)?;
        let joined = self.join_pair(a, b);
        let h = self.encode(tape, bound, &joined, true)?;
        let feat = self.pool_var(tape, h, &joined, self.prompt_rows())?;
        let logits = tape.matmul_bt(feat, bound.get("head.pair.weight")?)?;
        let logits = tape.add_row(logits, bound.get("head.pair.bias")?)?;
        Ok((logits, feat))
    }

    /// Start and end logits (`1×n` each, content positions only) and the pooled feature.
    pub fn forward_span(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<(Var, Var, Var)> {
        self.expect_kind(TaskKind::Span)?;
        let h = self.encode(tape, bound, tokens, true)?;
        let k = self.prompt_rows();
        let rows: Vec<usize> = (k..k + tokens.len()).collect();
        let content = tape.gather_rows(h, &rows)?;
        let start = tape.matmul_bt(bound.get("head.span.start")?, content)?;
        let end = tape.matmul_bt(bound.get("head.span.end")?, content)?;
        let feat = self.pool_var(tape, h, tokens, k)?;
        Ok((start, end, feat))
    }

    fn expect_kind(&self, kind: TaskKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "model has a {} head, {} forward requested",
                self.kind, kind
            )));
        }
        Ok(())
    }

    /// Untracked pair logits.
    pub fn pair_logits(&self, a: &[usize], b: &[usize]) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let (logits, _) = self.forward_pair(&mut tape, &bound, a, b)?;
        let d = tape.value(logits).data();
        Ok([d[0], d[1]])
    }

    /// Untracked span logits `(start, end)`.
    pub fn span_logits(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let (s, e, _) = self.forward_span(&mut tape, &bound, tokens)?;
        Ok((tape.value(s).data().to_vec(), tape.value(e).data().to_vec()))
    }

    /// Untracked hidden states.
    pub fn encode_plain(&self, tokens: &[usize], use_prompt: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let h = self.encode(&mut tape, &bound, tokens, use_prompt)?;
        Ok(tape.value(h).clone())
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax of start, then argmax of end among positions at or after start.
/// Ties go to the lowest index.
pub fn predict_span(start: &[f64], end: &[f64]) -> (usize, usize) {
    let s = argmax(start);
    let e = s + argmax(&end[s..]);
    (s, e)
}

/// Parameters of a model registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn cfg16() -> TransformerConfig {
        TransformerConfig {
            model_dim: 16,
            ..TransformerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig {
            heads: 3,
            ..TransformerConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = TransformerConfig {
            ff_dim: 0,
            ..TransformerConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn encode_shape() {
        let m = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(1)).unwrap();
        let h = m.encode_plain(&[1, 2, 3, 4, 5], true).unwrap();
        assert_eq!(h.shape(), &[5, 16]);
    }

    #[test]
    fn zero_layers_is_embedding_plus_position() {
        let cfg = TransformerConfig {
            layers: 0,
            ..cfg16()
        };
        let m = AdaptedModel::new(cfg, TaskKind::Pair, &mut rng_from(2)).unwrap();
        let tokens = [3, 1, 4, 1, 5];
        let h = m.encode_plain(&tokens, false).unwrap();
        let e = m.param("embed.token").unwrap();
        let p = m.param("embed.pos").unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            for c in 0..16 {
                assert_eq!(h.at(i, c), e.at(t, c) + p.at(i, c));
            }
        }
    }

    #[test]
    fn encode_errors() {
        let m = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(3)).unwrap();
        assert!(matches!(
            m.encode_plain(&[64], false),
            Err(Error::Vocabulary { id: 64, vocab: 64 })
        ));
        let long = vec![1; 65];
        assert!(matches!(m.encode_plain(&long, false), Err(Error::Length { .. })));
        assert!(matches!(m.encode_plain(&[], false), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_examples() {
        let one = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(pool(&one).unwrap().as_slice(), &[1.0, 2.0]);
        let two = Tensor::from_rows(&[&[0.0, 0.0], &[2.0, 4.0]]).unwrap();
        assert_eq!(pool(&two).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_pair_head_gives_zero_logits() {
        let mut m = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(4)).unwrap();
        m.params_mut().insert("head.pair.weight", Tensor::zeros(&[2, 16]));
        assert_eq!(m.pair_logits(&[1, 2], &[3, 4]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn pair_forward_is_deterministic() {
        let m = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(5)).unwrap();
        let m2 = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(5)).unwrap();
        let a = m.pair_logits(&[1, 2, 3], &[4, 5]).unwrap();
        let b = m2.pair_logits(&[1, 2, 3], &[4, 5]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn span_prediction_rules() {
        assert_eq!(predict_span(&[0.3], &[-1.0]), (0, 0));
        assert_eq!(predict_span(&[0.0; 5], &[0.0; 5]), (0, 0));
        // end must not precede start
        assert_eq!(predict_span(&[0.0, 0.0, 5.0, 0.0], &[9.0, 0.0, 0.0, 1.0]), (2, 3));
        let mut m = AdaptedModel::new(cfg16(), TaskKind::Span, &mut rng_from(6)).unwrap();
        m.params_mut().insert("head.span.start", Tensor::zeros(&[1, 16]));
        m.params_mut().insert("head.span.end", Tensor::zeros(&[1, 16]));
        let (s, e) = m.span_logits(&[1, 2, 3, 4]).unwrap();
        assert!(s.iter().chain(&e).all(|&v| v == 0.0));
        assert_eq!(predict_span(&s, &e), (0, 0));
    }

    #[test]
    fn pad_positions_do_not_affect_content() {
        let m = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(7)).unwrap();
        let pad = m.config().pad_id();
        let plain = m.encode_plain(&[1, 2, 3], false).unwrap();
        let padded = m.encode_plain(&[1, 2, 3, pad, pad], false).unwrap();
        for r in 0..3 {
            for c in 0..16 {
                assert!((plain.at(r, c) - padded.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_head_is_rejected() {
        let m = AdaptedModel::new(cfg16(), TaskKind::Pair, &mut rng_from(8)).unwrap();
        assert!(matches!(m.span_logits(&[1, 2]), Err(Error::Config(_))));
    }
}
