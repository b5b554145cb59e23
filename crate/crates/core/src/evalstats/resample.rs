use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evalstats::metrics::{auroc, r_squared};
use crate::evalstats::probe::{fit_linear_probe, ProbeSettings};
use crate::evalstats::task::{MetricKind, ProbeKind, ProbeTask};
use crate::matrix::DenseMatrix;
use crate::parallel::{derive_seed, try_map_indexed, ExecMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    /// Fresh random holdout drawn per replicate, disjoint from its training pool.
    pub holdout: usize,
    pub seed: u64,
    /// Redraws allowed per replicate when a draw leaves a class missing.
    pub max_retries: usize,
    pub probe: ProbeSettings,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            holdout: 100,
            seed: 0,
            max_retries: 100,
            probe: ProbeSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub feature_set: String,
    pub task: ProbeTask,
    pub metric: MetricKind,
    pub values: Vec<f64>,
}

impl MetricSample {
    pub fn mean(&self) -> f64 {
        crate::evalstats::metrics::mean_std(&self.values).0
    }
}

fn replicate(
    features: &DenseMatrix,
    labels: &[f64],
    kind: ProbeKind,
    cfg: &BootstrapConfig,
    r: usize,
) -> Result<f64> {
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, r as u64));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..=cfg.max_retries {
        order.shuffle(&mut rng);
        let (hold, pool) = order.split_at(cfg.holdout);
        let train: Vec<usize> = (0..pool.len())
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let y_train: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let y_hold: Vec<f64> = hold.iter().map(|&i| labels[i]).collect();
        if kind == ProbeKind::Binary {
            let pos = |ys: &[f64]| ys.iter().filter(|&&y| y == 1.0).count();
            let (ph, pt) = (pos(&y_hold), pos(&y_train));
            if ph == 0 || ph == y_hold.len() || pt < 2 || y_train.len() - pt < 2 {
                continue;
            }
        } else if y_hold.iter().all(|&y| y == y_hold[0]) {
            continue;
        }
        let probe = fit_linear_probe(&features.select_rows(&train), &y_train, kind, &cfg.probe)?;
        let pred = probe.predict(&features.select_rows(hold))?;
        return match kind {
            ProbeKind::Binary => {
                let truth: Vec<bool> = y_hold.iter().map(|&y| y == 1.0).collect();
                auroc(&pred, &truth)
            }
            ProbeKind::Regression => r_squared(&pred, &y_hold),
        };
    }
    Err(LabError::invalid(format!(
        "bootstrap replicate {r}: no usable holdout after {} retries (too few samples of one class?)",
        cfg.max_retries
    )))
}

/// Bootstrap distribution of a probe metric; see [`bootstrap_metric_with`].
pub fn bootstrap_metric(
    feature_set: &str,
    task: ProbeTask,
    features: &DenseMatrix,
    labels: &[f64],
    cfg: &BootstrapConfig,
) -> Result<MetricSample> {
    bootstrap_metric_with(feature_set, task, features, labels, cfg, ExecMode::default())
}

/// Each replicate `r` draws a fresh holdout of `cfg.holdout` subjects, fits a
/// probe on a with-replacement resample of the remaining subjects and scores
/// the holdout. Replicate `r` depends only on `(cfg.seed, r)`, so two
/// feature sets evaluated with the same config share their resamples.
pub fn bootstrap_metric_with(
    feature_set: &str,
    task: ProbeTask,
    features: &DenseMatrix,
    labels: &[f64],
    cfg: &BootstrapConfig,
    mode: ExecMode,
) -> Result<MetricSample> {
    let n = labels.len();
    if features.rows() != n {
        return Err(LabError::invalid(format!(
            "bootstrap: {} feature rows but {n} labels",
            features.rows()
        )));
    }
    if cfg.n_boot == 0 || cfg.holdout == 0 {
        return Err(LabError::invalid("n_boot and holdout must be positive"));
    }
    let kind = task.kind();
    let min_fit = match kind {
        ProbeKind::Binary => 4,
        ProbeKind::Regression => features.cols() + 1,
    };
    if n < cfg.holdout + min_fit {
        return Err(LabError::invalid(format!(
            "task {task}: {n} eligible subjects, need at least {} (holdout {} + {min_fit} to fit)",
            cfg.holdout + min_fit,
            cfg.holdout
        )));
    }
    let values = try_map_indexed(cfg.n_boot, mode, |r| replicate(features, labels, kind, cfg, r))?;
    Ok(MetricSample {
        feature_set: feature_set.to_string(),
        task,
        metric: task.metric(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p: f64,
    /// `|mean(a) - mean(b)|`.
    pub observed: f64,
    pub n_perm: usize,
    /// Smallest nonzero p this many permutations can report.
    pub resolution: f64,
    /// Probability that a random swap pattern is all-or-nothing, `2^(1-n)`.
    pub exact_floor: f64,
}

/// Paired permutation test on the difference of means. Each permutation
/// swaps the members of pair `i` with probability 1/2; the swap patterns
/// depend only on `seed`, which makes the test symmetric in `a` and `b`.
pub fn permutation_test(
    a: &MetricSample,
    b: &MetricSample,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n_perm == 0 {
        return Err(LabError::invalid("n_perm must be positive"));
    }
    if a.values.len() != b.values.len() || a.values.is_empty() {
        return Err(LabError::invalid(format!(
            "permutation test needs equal, non-empty samples; got {} and {}",
            a.values.len(),
            b.values.len()
        )));
    }
    if a.metric != b.metric {
        return Err(LabError::invalid(format!(
            "cannot compare {} with {}",
            a.metric, b.metric
        )));
    }
    let d: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed_sum: f64 = d.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let mut s = 0.0;
        let mut bits = 0u64;
        for (i, v) in d.iter().enumerate() {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            s += if bits & 1 == 1 { -v } else { *v };
            bits >>= 1;
        }
        if s.abs() >= observed_sum.abs() {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        p: hits as f64 / n_perm as f64,
        observed: observed_sum.abs() / n as f64,
        n_perm,
        resolution: 1.0 / n_perm as f64,
        exact_floor: 2f64.powi(1 - n.min(1100) as i32),
    })
}
