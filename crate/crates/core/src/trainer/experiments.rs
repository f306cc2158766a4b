use serde::{Deserialize, Serialize};

use super::{train_with_cache, Metrics, RunConfig, SourceModelCache};
use crate::error::{Error, Result};

/// Seeds a stability estimate needs at minimum.
pub const MIN_STABILITY_SEEDS: usize = 3;

/// `1 / (1 + σ/μ)` over per-seed scores, with the population σ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub score: f64,
    pub diagnostic: Option<String>,
    /// Final dev metrics per seed, when produced by [`stability`].
    pub metrics: Vec<Metrics>,
}

impl StabilityReport {
    pub fn from_values(seeds: &[u64], values: &[f64]) -> Result<Self> {
        if seeds.len() != values.len() {
            return Err(Error::Contract(format!(
                "{} seeds but {} values",
                seeds.len(),
                values.len()
            )));
        }
        if values.len() < MIN_STABILITY_SEEDS {
            return Err(Error::Config(format!(
                "stability needs at least {MIN_STABILITY_SEEDS} seeds, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "stability".into(),
                detail: format!("non-finite score {v}"),
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let (score, diagnostic) = if mean == 0.0 {
            (0.0, Some("mean score is zero; stability defined as 0".to_string()))
        } else {
            (1.0 / (1.0 + std / mean), None)
        };
        Ok(Self {
            seeds: seeds.to_vec(),
            values: values.to_vec(),
            mean,
            std,
            score,
            diagnostic,
            metrics: Vec::new(),
        })
    }
}

pub fn stability(config: &RunConfig, seeds: &[u64]) -> Result<StabilityReport> {
    stability_with_cache(config, seeds, &mut SourceModelCache::new())
}

/// Trains once per seed and scores the final dev primary metric.
pub fn stability_with_cache(
    config: &RunConfig,
    seeds: &[u64],
    cache: &mut SourceModelCache,
) -> Result<StabilityReport> {
    if seeds.len() < MIN_STABILITY_SEEDS {
        return Err(Error::Config(format!(
            "stability needs at least {MIN_STABILITY_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    let kind = config.data.kind;
    let mut metrics = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = train_with_cache(&config.with_seed(seed), cache)?;
        metrics.push(*run.final_dev());
    }
    let values: Vec<f64> = metrics.iter().map(|m| m.primary(kind)).collect();
    let mut report = StabilityReport::from_values(seeds, &values)?;
    report.metrics = metrics;
    Ok(report)
}

/// Test metrics of one training at a given pseudo-data ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub delta: f64,
    pub train_size: usize,
    pub metrics: Metrics,
}

pub fn augmentation_sweep(config: &RunConfig, ratios: &[f64], delta: f64) -> Result<Vec<SweepPoint>> {
    augmentation_sweep_with_cache(config, ratios, delta, &mut SourceModelCache::new())
}

/// One training per ratio, in ascending order starting at 0. All runs share
/// the seed, so they differ only in the pseudo examples appended.
pub fn augmentation_sweep_with_cache(
    config: &RunConfig,
    ratios: &[f64],
    delta: f64,
    cache: &mut SourceModelCache,
) -> Result<Vec<SweepPoint>> {
    if ratios.first() != Some(&0.0) {
        return Err(Error::Config("sweep ratios must start at 0".into()));
    }
    if ratios.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("sweep ratios must be strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut cfg = config.clone();
        cfg.augment.ratio = ratio;
        cfg.augment.drift = delta;
        let run = train_with_cache(&cfg, cache)?;
        out.push(SweepPoint {
            ratio,
            delta,
            train_size: run.train_size,
            metrics: *run.test(),
        });
    }
    Ok(out)
}

/// Point-wise mean of sweeps over the same ratios.
pub fn mean_curve(curves: &[Vec<SweepPoint>]) -> Result<Vec<SweepPoint>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Contract("no curves to average".into()))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Contract("curves differ in length".into()));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let at = |f: fn(&Metrics) -> f64| curves.iter().map(|c| f(&c[i].metrics)).sum::<f64>() / n;
            SweepPoint {
                ratio: first[i].ratio,
                delta: first[i].delta,
                train_size: first[i].train_size,
                metrics: Metrics {
                    accuracy: at(|m| m.accuracy),
                    f1: at(|m| m.f1),
                    em: at(|m| m.em),
                    loss: first[i].metrics.loss,
                },
            }
        })
        .collect())
}
