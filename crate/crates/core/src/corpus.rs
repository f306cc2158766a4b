//! Synthetic cross-lingual tasks.
//!
//! The source language uses the lower half of the content vocabulary. A
//! [`CipherLanguage`] maps it onto the disjoint upper half through a seeded
//! permutation, optionally re-randomising tokens ("morphology noise"). The
//! target language therefore shares task structure with the source while
//! sharing no surface tokens.
//!
//! Token layout for a vocabulary of size `V`: ids `0..V-2` are content,
//! `V-2` is PAD and `V-1` is SEP. With `h = (V-2)/2`, source tokens are
//! `0..h` and target tokens `h..2h`. Source ids 0 and 1 are the span task's
//! open/close markers; the rest are words.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::seed::{rng_from, SeedStreams, StreamRng};

/// Number of latent templates behind the pair task.
pub const PAIR_TEMPLATES: usize = 16;
/// Words per rendered template.
pub const PAIR_TEMPLATE_LEN: usize = 6;
/// Per-token substitution probability when rendering a template.
pub const PAIR_RENDER_NOISE: f64 = 0.15;
/// Span-task sequence length range (inclusive).
pub const SPAN_LEN_RANGE: (usize, usize) = (8, 16);
/// Maximum answer length of the span task.
pub const SPAN_MAX_ANSWER: usize = 3;

const OPEN_MARKER: usize = 0;
const CLOSE_MARKER: usize = 1;
const PSEUDO_ID_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Source,
    Target,
}

/// Split between source and target halves of the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    half: usize,
}

impl VocabLayout {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 10 {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} is too small for two languages with markers"
            )));
        }
        Ok(Self {
            vocab_size,
            half: (vocab_size - 2) / 2,
        })
    }

    pub fn pad(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn sep(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn is_reserved(&self, t: usize) -> bool {
        t == self.pad() || t == self.sep()
    }

    pub fn source_words(&self) -> std::ops::Range<usize> {
        2..self.half
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.half..2 * self.half
    }
}

/// Seeded bijection over content tokens swapping the source and target
/// halves, plus a morphology-noise rate.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherLanguage {
    layout: VocabLayout,
    forward: Vec<usize>,
    inverse: Vec<usize>,
    noise: f64,
}

impl CipherLanguage {
    pub fn new<R: Rng + ?Sized>(layout: VocabLayout, noise: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Config(format!("noise rate {noise} outside [0, 1]")));
        }
        let h = layout.half();
        let mut sigma: Vec<usize> = (0..h).collect();
        sigma.shuffle(rng);
        let mut forward: Vec<usize> = (0..layout.vocab_size).collect();
        for (i, &s) in sigma.iter().enumerate() {
            forward[i] = h + s;
            forward[h + s] = i;
        }
        let mut inverse = vec![0; layout.vocab_size];
        for (i, &f) in forward.iter().enumerate() {
            inverse[f] = i;
        }
        Ok(Self {
            layout,
            forward,
            inverse,
            noise,
        })
    }

    pub fn layout(&self) -> VocabLayout {
        self.layout
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn map(&self, t: usize) -> usize {
        self.forward[t]
    }

    pub fn unmap(&self, t: usize) -> usize {
        self.inverse[t]
    }

    /// A uniformly random target-language token different from `avoid`.
    fn random_target_token<R: Rng + ?Sized>(&self, avoid: usize, rng: &mut R) -> usize {
        let range = self.layout.target_range();
        loop {
            let t = rng.random_range(range.clone());
            if t != avoid {
                return t;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Span(usize, usize),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Span(..) => None,
        }
    }

    pub fn span(&self) -> Option<(usize, usize)> {
        match self {
            Label::Span(s, e) => Some((*s, *e)),
            Label::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub tokens_b: Option<Vec<usize>>,
    pub label: Label,
    pub lang: Lang,
    pub pair_id: u64,
    /// Source-language counterpart carrying the same label.
    pub parallel: Option<Box<TaskInstance>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub source_train: usize,
    pub target_train: usize,
    pub target_dev: usize,
    pub target_test: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("source_train", self.source_train),
            ("target_train", self.target_train),
            ("target_dev", self.target_dev),
            ("target_test", self.target_test),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if self.target_train * 10 > self.source_train {
            return Err(Error::LowResource {
                target: self.target_train,
                source_size: self.source_train,
            });
        }
        Ok(())
    }
}

/// Samples source-language instances of one task kind.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGenerator {
    kind: TaskKind,
    layout: VocabLayout,
    templates: Vec<Vec<usize>>,
}

impl TaskGenerator {
    pub fn new<R: Rng + ?Sized>(kind: TaskKind, layout: VocabLayout, rng: &mut R) -> Self {
        let words = layout.source_words();
        let templates = (0..PAIR_TEMPLATES)
            .map(|_| {
                (0..PAIR_TEMPLATE_LEN)
                    .map(|_| rng.random_range(words.clone()))
                    .collect()
            })
            .collect();
        Self {
            kind,
            layout,
            templates,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn templates(&self) -> &[Vec<usize>] {
        &self.templates
    }

    fn render<R: Rng + ?Sized>(&self, template: usize, rng: &mut R) -> Vec<usize> {
        let words = self.layout.source_words();
        self.templates[template]
            .iter()
            .map(|&t| {
                if rng.random_bool(PAIR_RENDER_NOISE) {
                    rng.random_range(words.clone())
                } else {
                    t
                }
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, pair_id: u64, rng: &mut R) -> TaskInstance {
        match self.kind {
            TaskKind::Pair => {
                let positive = rng.random_bool(0.5);
                let t1 = rng.random_range(0..self.templates.len());
                let t2 = if positive {
                    t1
                } else {
                    let other = rng.random_range(0..self.templates.len() - 1);
                    if other >= t1 {
                        other + 1
                    } else {
                        other
                    }
                };
                TaskInstance {
                    tokens: self.render(t1, rng),
                    tokens_b: Some(self.render(t2, rng)),
                    label: Label::Class(usize::from(positive)),
                    lang: Lang::Source,
                    pair_id,
                    parallel: None,
                }
            }
            TaskKind::Span => {
                let words = self.layout.source_words();
                let n = rng.random_range(SPAN_LEN_RANGE.0..=SPAN_LEN_RANGE.1);
                let answer = rng.random_range(1..=SPAN_MAX_ANSWER);
                let open = rng.random_range(0..=n - answer - 2);
                let mut tokens: Vec<usize> = (0..n).map(|_| rng.random_range(words.clone())).collect();
                tokens[open] = OPEN_MARKER;
                tokens[open + answer + 1] = CLOSE_MARKER;
                TaskInstance {
                    tokens,
                    tokens_b: None,
                    label: Label::Span(open + 1, open + answer),
                    lang: Lang::Source,
                    pair_id,
                    parallel: None,
                }
            }
        }
    }
}

fn cipher_tokens<R: Rng + ?Sized>(tokens: &[usize], lang: &CipherLanguage, rng: &mut R) -> Vec<usize> {
    let layout = lang.layout();
    tokens
        .iter()
        .map(|&t| {
            if layout.is_reserved(t) {
                return t;
            }
            let mapped = lang.map(t);
            if lang.noise() > 0.0 && rng.random_bool(lang.noise()) {
                lang.random_target_token(mapped, rng)
            } else {
                mapped
            }
        })
        .collect()
}

/// Renders a source instance in the cipher language. The label is kept and
/// the source instance is attached as the parallel counterpart.
pub fn translate<R: Rng + ?Sized>(x: &TaskInstance, lang: &CipherLanguage, rng: &mut R) -> TaskInstance {
    let tokens = cipher_tokens(&x.tokens, lang, rng);
    let tokens_b = x.tokens_b.as_ref().map(|b| cipher_tokens(b, lang, rng));
    let mut source = x.clone();
    source.parallel = None;
    TaskInstance {
        tokens,
        tokens_b,
        label: x.label,
        lang: Lang::Target,
        pair_id: x.pair_id,
        parallel: Some(Box::new(source)),
    }
}

/// Generated splits plus the generator and language that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub spec: SplitSpec,
    pub source_train: Vec<TaskInstance>,
    pub target_train: Vec<TaskInstance>,
    pub target_dev: Vec<TaskInstance>,
    pub target_test: Vec<TaskInstance>,
    pub language: CipherLanguage,
    pub generator: TaskGenerator,
}

/// Builds all splits deterministically from `spec.seed`.
pub fn generate_task(kind: TaskKind, spec: &SplitSpec, vocab_size: usize, noise: f64) -> Result<Dataset> {
    spec.validate()?;
    let layout = VocabLayout::new(vocab_size)?;
    let streams = SeedStreams::new(spec.seed);
    let language = CipherLanguage::new(layout, noise, &mut streams.rng("language"))?;
    let generator = TaskGenerator::new(kind, layout, &mut streams.rng("templates"));

    let mut next_id = 0u64;
    let mut source_split = |n: usize, rng: &mut StreamRng| -> Vec<TaskInstance> {
        (0..n)
            .map(|_| {
                next_id += 1;
                generator.sample(next_id, rng)
            })
            .collect()
    };
    let source_train = source_split(spec.source_train, &mut streams.rng("source_train"));
    let target_src = source_split(spec.target_train, &mut streams.rng("target_train"));
    let dev_src = source_split(spec.target_dev, &mut streams.rng("target_dev"));
    let test_src = source_split(spec.target_test, &mut streams.rng("target_test"));

    let mut trng = streams.rng("translate");
    let mut to_target = |xs: Vec<TaskInstance>| -> Vec<TaskInstance> {
        xs.iter().map(|x| translate(x, &language, &mut trng)).collect()
    };
    let target_train = to_target(target_src);
    let target_dev = to_target(dev_src);
    let target_test = to_target(test_src);

    Ok(Dataset {
        kind,
        spec: *spec,
        source_train,
        target_train,
        target_dev,
        target_test,
        language,
        generator,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPlan {
    /// Pseudo examples as a fraction of the real target-train size.
    pub ratio: f64,
    /// Label-noise probability; tokens are substituted at half this rate.
    pub drift: f64,
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio.is_finite() && self.ratio >= 0.0) {
            return Err(Error::Config(format!("augmentation ratio {} must be >= 0", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::Config(format!("drift {} outside [0, 1]", self.drift)));
        }
        Ok(())
    }

    pub fn pseudo_count(&self, n: usize) -> usize {
        (self.ratio * n as f64).round() as usize
    }
}

/// Appends `round(ratio·n)` rule-generated target examples to `base`.
/// Pseudo examples carry no parallel counterpart. Each one is corrupted
/// with probability `drift`: its label is flipped (pair) or shifted by ±1
/// and clamped (span), and each of its content tokens is re-randomised with
/// probability `drift / 2`.
pub fn synthesize_pseudo(
    base: &[TaskInstance],
    plan: &AugmentationPlan,
    generator: &TaskGenerator,
    language: &CipherLanguage,
) -> Result<Vec<TaskInstance>> {
    plan.validate()?;
    let count = plan.pseudo_count(base.len());
    let mut out = base.to_vec();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = rng_from(plan.seed);
    let token_rate = plan.drift / 2.0;
    let layout = language.layout();
    for i in 0..count {
        let source = generator.sample(PSEUDO_ID_OFFSET + i as u64, &mut rng);
        let mut x = translate(&source, language, &mut rng);
        x.parallel = None;
        if plan.drift == 0.0 || !rng.random_bool(plan.drift) {
            out.push(x);
            continue;
        }
        x.label = match x.label {
            Label::Class(c) => Label::Class(1 - c),
            Label::Span(s, e) => {
                let n = x.tokens.len() as i64;
                let shift: i64 = if rng.random_bool(0.5) { 1 } else { -1 };
                let s2 = (s as i64 + shift).clamp(0, n - 1) as usize;
                let e2 = (e as i64 + shift).clamp(0, n - 1) as usize;
                Label::Span(s2.min(e2), s2.max(e2))
            }
        };
        let mut corrupt = |toks: &mut Vec<usize>| {
            for t in toks.iter_mut() {
                if !layout.is_reserved(*t) && rng.random_bool(token_rate) {
                    *t = language.random_target_token(*t, &mut rng);
                }
            }
        };
        corrupt(&mut x.tokens);
        if let Some(b) = x.tokens_b.as_mut() {
            corrupt(b);
        }
        out.push(x);
    }
    Ok(out)
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_b: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[usize; 2]>,
    pub lang: Lang,
    pub pair_id: u64,
}

impl From<&TaskInstance> for InstanceRecord {
    fn from(x: &TaskInstance) -> Self {
        Self {
            tokens: x.tokens.clone(),
            tokens_b: x.tokens_b.clone(),
            label: x.label.class(),
            span: x.label.span().map(|(s, e)| [s, e]),
            lang: x.lang,
            pair_id: x.pair_id,
        }
    }
}

impl TryFrom<InstanceRecord> for TaskInstance {
    type Error = Error;

    fn try_from(r: InstanceRecord) -> Result<Self> {
        let label = match (r.label, r.span) {
            (Some(c), None) => Label::Class(c),
            (None, Some([s, e])) => {
                if !(s <= e && e < r.tokens.len()) {
                    return Err(Error::Label(format!("span ({s}, {e}) outside sequence")));
                }
                Label::Span(s, e)
            }
            _ => return Err(Error::Label("record needs exactly one of label or span".into())),
        };
        Ok(Self {
            tokens: r.tokens,
            tokens_b: r.tokens_b,
            label,
            lang: r.lang,
            pair_id: r.pair_id,
            parallel: None,
        })
    }
}

/// One JSON object per line, newline-terminated.
pub fn to_jsonl<'a>(instances: impl IntoIterator<Item = &'a TaskInstance>) -> String {
    let mut out = String::new();
    for x in instances {
        out.push_str(&serde_json::to_string(&InstanceRecord::from(x)).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<TaskInstance>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let rec: InstanceRecord = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            TaskInstance::try_from(rec)
        })
        .collect()
}
