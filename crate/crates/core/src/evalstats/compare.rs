use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evalstats::metrics::mean_std;
use crate::evalstats::resample::{bootstrap_metric, permutation_test, BootstrapConfig, MetricSample};
use crate::evalstats::task::{MetricKind, ProbeTask};
use crate::io::{fmt_f64, write_atomic};
use crate::matrix::DenseMatrix;
use crate::synthgen::Subject;

/// Feature rows keyed by subject id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub features: DenseMatrix,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, features: DenseMatrix) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(LabError::invalid(format!(
                "{} ids for {} feature rows",
                ids.len(),
                features.rows()
            )));
        }
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(LabError::invalid("feature table has duplicate ids"));
        }
        Ok(Self { ids, features })
    }

    /// Rows reordered to follow `order`; every id must be present exactly.
    pub fn aligned_to(&self, order: &[String]) -> Result<DenseMatrix> {
        let have: BTreeSet<&String> = self.ids.iter().collect();
        let want: BTreeSet<&String> = order.iter().collect();
        if have != want {
            let offending: Vec<&str> = have
                .symmetric_difference(&want)
                .take(5)
                .map(|s| s.as_str())
                .collect();
            return Err(LabError::invalid(format!(
                "subject ids do not match; first offending ids: {}",
                offending.join(", ")
            )));
        }
        let pos: HashMap<&String, usize> = self.ids.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let idx: Vec<usize> = order.iter().map(|id| pos[id]).collect();
        Ok(self.features.select_rows(&idx))
    }

    pub fn to_csv(&self, prefix: &str) -> String {
        let mut s = String::from("id");
        for j in 0..self.features.cols() {
            s.push_str(&format!(",{prefix}{j}"));
        }
        s.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(id);
            for v in self.features.row(i) {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path, prefix: &str) -> Result<()> {
        write_atomic(path, self.to_csv(prefix).as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        let parse_err = |offset: u64, msg: String| LabError::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if !bytes.ends_with(b"\n") {
            return Err(parse_err(bytes.len() as u64, "file is truncated".into()));
        }
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let width = rdr
            .headers()
            .map_err(|e| parse_err(e.position().map_or(0, |p| p.byte()), e.to_string()))?
            .len()
            .saturating_sub(1);
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.byte()), e.to_string()))?;
            let off = rec.position().map_or(0, |p| p.byte());
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(off, format!("cannot parse float from {field:?}")))?;
                data.push(v);
            }
        }
        let rows = ids.len();
        Self::new(ids, DenseMatrix::from_vec(rows, width, data)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub bootstrap: BootstrapConfig,
    pub n_perm: usize,
    pub perm_seed: u64,
    pub include_values: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            bootstrap: BootstrapConfig::default(),
            n_perm: 10_000,
            perm_seed: 0,
            include_values: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub feature_set: String,
    pub task: ProbeTask,
    pub metric: MetricKind,
    pub mean: f64,
    pub std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: ProbeTask,
    pub a: String,
    pub b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p: f64,
    pub resolution: f64,
    pub exact_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config: CompareConfig,
    pub notes: Vec<String>,
    pub results: Vec<MetricSummary>,
    pub comparisons: Vec<Comparison>,
}

impl ProbeReport {
    pub fn result(&self, feature_set: &str, task: ProbeTask) -> Option<&MetricSummary> {
        self.results
            .iter()
            .find(|r| r.feature_set == feature_set && r.task == task)
    }

    pub fn comparison(&self, task: ProbeTask, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| {
            c.task == task && ((c.a == a && c.b == b) || (c.a == b && c.b == a))
        })
    }

    /// One line per sample: `feature_set,task,replicate,value`.
    pub fn values_csv(samples: &[MetricSample]) -> String {
        let mut s = String::from("feature_set,task,replicate,value\n");
        for m in samples {
            for (r, v) in m.values.iter().enumerate() {
                s.push_str(&format!("{},{},{r},{}\n", m.feature_set, m.task, fmt_f64(*v)));
            }
        }
        s
    }
}

/// Bootstrap every (feature set, task) pair and permutation-test every pair
/// of feature sets within a task.
pub fn compare_feature_sets(
    tables: &[(String, FeatureTable)],
    subjects: &[Subject],
    tasks: &[ProbeTask],
    cfg: &CompareConfig,
) -> Result<(ProbeReport, Vec<MetricSample>)> {
    if tables.is_empty() || tasks.is_empty() {
        return Err(LabError::invalid("need at least one feature set and one task"));
    }
    let order: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let aligned = tables
        .iter()
        .map(|(name, t)| {
            t.aligned_to(&order)
                .map_err(|e| LabError::invalid(format!("feature set {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    let mut results = Vec::new();
    let mut comparisons = Vec::new();
    for &task in tasks {
        let (idx, labels) = task.select(subjects);
        let mut per_set = Vec::with_capacity(tables.len());
        for ((name, _), x) in tables.iter().zip(&aligned) {
            let s = bootstrap_metric(name, task, &x.select_rows(&idx), &labels, &cfg.bootstrap)?;
            let (mean, std) = mean_std(&s.values);
            results.push(MetricSummary {
                feature_set: name.clone(),
                task,
                metric: s.metric,
                mean,
                std,
                values: cfg.include_values.then(|| s.values.clone()),
            });
            per_set.push(s);
        }
        for i in 0..per_set.len() {
            for j in i + 1..per_set.len() {
                let r = permutation_test(&per_set[i], &per_set[j], cfg.n_perm, cfg.perm_seed)?;
                comparisons.push(Comparison {
                    task,
                    a: per_set[i].feature_set.clone(),
                    b: per_set[j].feature_set.clone(),
                    mean_a: per_set[i].mean(),
                    mean_b: per_set[j].mean(),
                    p: r.p,
                    resolution: r.resolution,
                    exact_floor: r.exact_floor,
                });
            }
        }
        samples.extend(per_set);
    }
    let notes = vec![
        "binary probes: logistic regression, full-batch gradient descent on standardized features".into(),
        "regression probes: closed-form ridge on standardized features, intercept unpenalized".into(),
        "each replicate draws a fresh holdout disjoint from its with-replacement training resample".into(),
        "replicate r of every feature set uses the same resample seed".into(),
        "age regression uses CN subjects; conversion tasks exclude subjects already diagnosed AD".into(),
    ];
    Ok((
        ProbeReport {
            config: cfg.clone(),
            notes,
            results,
            comparisons,
        },
        samples,
    ))
}
