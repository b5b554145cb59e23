//! Frozen-feature probes and the statistics used to compare feature sets.

mod compare;
mod fdr;
mod metrics;
mod probe;
mod resample;
mod task;

pub use compare::{compare_feature_sets, Comparison, CompareConfig, FeatureTable, MetricSummary, ProbeReport};
pub use fdr::{bh_fdr, FdrResult};
pub use metrics::{auroc, mean_std, pearson, r_squared};
pub use probe::{fit_linear_probe, recovery_r2, standardize_columns, LinearProbe, ProbeSettings, Standardizer};
pub use resample::{bootstrap_metric, bootstrap_metric_with, permutation_test, BootstrapConfig, MetricSample, PermutationResult};
pub use task::{MetricKind, ProbeKind, ProbeTask};
