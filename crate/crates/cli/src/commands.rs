use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use peftlab::corpus::{to_jsonl, Dataset, TaskInstance};
use peftlab::gradcheck::{self, GradcheckReport, MAX_DIM};
use peftlab::peft::FreezePlan;
use peftlab::tensor::OpKind;
use peftlab::trainer::{
    self, augmentation_sweep_with_cache, mean_curve, stability_with_cache, Metrics, RunConfig, RunOutcome,
    SourceModelCache, StabilityReport, SweepPoint, TraceRow,
};

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::error::{CliError, Result};

pub const METRICS_HEADER: &str = "run_id,seed,epoch,split,accuracy,f1,em,loss_task,loss_align,loss_reg,loss_total";
pub const STABILITY_HEADER: &str = "row,seed,accuracy,f1,em,value";
pub const SWEEP_HEADER: &str = "ratio,delta,seeds,train_size,accuracy,f1,em";

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PLAN_FILE: &str = "freeze_plan.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STABILITY_FILE: &str = "stability.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_dev: usize,
    pub target_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub kind: String,
    pub vocab_size: usize,
    pub noise: f64,
    pub sizes: SplitSizes,
}

fn parallel_of(split: &[TaskInstance]) -> Vec<TaskInstance> {
    split.iter().filter_map(|x| x.parallel.as_deref().cloned()).collect()
}

/// Writes every split as JSON lines, the source sides of the target splits
/// as `<split>_parallel.jsonl`, and a manifest.
pub fn generate_corpus(config: &RunConfig, out: &Path) -> Result<CorpusManifest> {
    let data: Dataset = config.generate_corpus()?;
    let splits: [(&str, &[TaskInstance]); 4] = [
        ("source_train", &data.source_train),
        ("target_train", &data.target_train),
        ("target_dev", &data.target_dev),
        ("target_test", &data.target_test),
    ];
    for (name, split) in splits {
        write(out, &format!("{name}.jsonl"), to_jsonl(split))?;
        if name.starts_with("target") {
            write(out, &format!("{name}_parallel.jsonl"), to_jsonl(&parallel_of(split)))?;
        }
    }
    let manifest = CorpusManifest {
        seed: config.seed,
        kind: config.data.kind.to_string(),
        vocab_size: config.model.vocab_size,
        noise: config.data.noise,
        sizes: SplitSizes {
            source_train: data.source_train.len(),
            target_train: data.target_train.len(),
            target_dev: data.target_dev.len(),
            target_test: data.target_test.len(),
        },
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    write(out, MANIFEST_FILE, text)?;
    Ok(manifest)
}

pub fn metrics_csv(run_id: &str, seed: u64, trace: &[TraceRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in trace {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{run_id},{seed},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.split, m.accuracy, m.f1, m.em, m.loss.task, m.loss.align, m.loss.reg, m.loss.total
        );
    }
    s
}

/// Trains with the corpus generated from the config and writes the
/// resolved config, checkpoint (with θ₀), freeze-plan manifest and metrics.
pub fn train(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    train_with_cache(config, out, &mut SourceModelCache::new())
}

pub fn train_with_cache(config: &RunConfig, out: &Path, cache: &mut SourceModelCache) -> Result<RunOutcome> {
    let run = trainer::train_with_cache(config, cache)?;
    write(out, CONFIG_FILE, config::to_json(config))?;
    write(out, CHECKPOINT_FILE, Checkpoint::from_model(&run.model, Some(&run.snapshot)).to_bytes())?;
    write(out, PLAN_FILE, run.plan.to_manifest())?;
    write(out, METRICS_FILE, metrics_csv(&config.run_id(), config.seed, &run.trace))?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub run_id: String,
    pub trainable: usize,
    pub dev: Metrics,
    pub test: Metrics,
}

/// Reloads a trained run from its output directory and scores dev and test
/// with the task loss.
pub fn evaluate(dir: &Path) -> Result<EvalReport> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = String::from_utf8_lossy(&read(&cfg_path)?).into_owned();
    let config = config::parse_config(&text).map_err(|detail| CliError::Config {
        path: cfg_path,
        detail,
    })?;
    let ckpt = Checkpoint::from_bytes(&read(&dir.join(CHECKPOINT_FILE))?)?;
    let model = ckpt.restore(&config)?;
    let plan_text = String::from_utf8_lossy(&read(&dir.join(PLAN_FILE))?).into_owned();
    let plan = FreezePlan::from_manifest(&model, &plan_text)?;
    let data = config.generate_corpus()?;
    let kind = config.data.kind;
    Ok(EvalReport {
        run_id: config.run_id(),
        trainable: peftlab::peft::count_trainable(&model, &plan),
        dev: trainer::evaluate(&model, &data.target_dev, kind)?,
        test: trainer::evaluate(&model, &data.target_test, kind)?,
    })
}

pub fn stability_csv(report: &StabilityReport) -> String {
    let mut s = String::from(STABILITY_HEADER);
    s.push('\n');
    for ((seed, m), v) in report.seeds.iter().zip(&report.metrics).zip(&report.values) {
        let _ = writeln!(s, "seed,{seed},{},{},{},{v}", m.accuracy, m.f1, m.em);
    }
    let _ = writeln!(s, "mean,,,,,{}", report.mean);
    let _ = writeln!(s, "std,,,,,{}", report.std);
    let _ = writeln!(s, "score,,,,,{}", report.score);
    s
}

/// One training per seed; writes per-seed final dev metrics and the score.
pub fn stability(config: &RunConfig, seeds: &[u64], out: &Path) -> Result<StabilityReport> {
    let report = stability_with_cache(config, seeds, &mut SourceModelCache::new())?;
    if let Some(d) = &report.diagnostic {
        log::warn!("{d}");
    }
    write(out, STABILITY_FILE, stability_csv(&report))?;
    Ok(report)
}

pub fn sweep_csv(points: &[SweepPoint], seeds: usize) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for p in points {
        let m = &p.metrics;
        let _ = writeln!(
            s,
            "{},{},{seeds},{},{},{},{}",
            p.ratio, p.delta, p.train_size, m.accuracy, m.f1, m.em
        );
    }
    s
}

/// Sweeps the pseudo-data ratio, averaging test metrics over `seeds`.
pub fn augment_sweep(
    config: &RunConfig,
    ratios: &[f64],
    delta: f64,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    let mut curves = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cache = SourceModelCache::new();
        curves.push(augmentation_sweep_with_cache(&config.with_seed(seed), ratios, delta, &mut cache)?);
    }
    let mean = mean_curve(&curves)?;
    write(out, SWEEP_FILE, sweep_csv(&mean, seeds.len()))?;
    Ok(mean)
}

/// Runs the gradient checker, failing with a numerical error above tolerance.
pub fn gradcheck(config: &RunConfig, fault: Option<(OpKind, f64)>) -> Result<GradcheckReport> {
    if config.model.model_dim > MAX_DIM {
        return Err(peftlab::Error::Config(format!(
            "gradcheck needs model_dim <= {MAX_DIM}, got {}",
            config.model.model_dim
        ))
        .into());
    }
    Ok(gradcheck::gradcheck(config, fault)?.into_result()?)
}
