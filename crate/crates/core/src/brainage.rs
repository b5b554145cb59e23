//! Brain-age-gap (BAG) pipeline: balanced age/sex buckets, a linear age
//! model per feature set, debiased gaps, fit metrics, cross-gap
//! correlations and outcome associations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{LabError, Result};
use crate::evalstats::{bh_fdr, fit_linear_probe, pearson, FeatureTable, LinearProbe, ProbeKind, ProbeSettings};
use crate::io::{fmt_f64, write_atomic};
use crate::matrix::DenseMatrix;
use crate::synthgen::Subject;

/// Lower edges of the four age bins; each spans ten years.
pub const AGE_BINS: [f64; 4] = [44.0, 54.0, 64.0, 74.0];
pub const N_BUCKETS: usize = 8;

/// Bucket index `2 * bin + sex`, or `None` outside 44-83.
pub fn bucket_of(age: f64, sex: u8) -> Option<usize> {
    if sex > 1 {
        return None;
    }
    AGE_BINS
        .iter()
        .position(|&lo| age >= lo && age < lo + 10.0)
        .map(|bin| 2 * bin + sex as usize)
}

pub fn bucket_name(bucket: usize) -> String {
    let lo = AGE_BINS[bucket / 2];
    let sex = if bucket % 2 == 1 { "M" } else { "F" };
    format!("{}-{}/{sex}", lo, lo + 9.0)
}

/// `per_bucket` subjects from each of the eight buckets, drawn without
/// replacement. Ids come back grouped by bucket.
pub fn select_balanced_subset(subjects: &[Subject], per_bucket: usize, seed: u64) -> Result<Vec<String>> {
    let mut buckets: Vec<Vec<&Subject>> = vec![Vec::new(); N_BUCKETS];
    for s in subjects {
        if let Some(b) = bucket_of(s.age, s.sex) {
            buckets[b].push(s);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(per_bucket * N_BUCKETS);
    for (b, members) in buckets.iter_mut().enumerate() {
        if members.len() < per_bucket {
            return Err(LabError::invalid(format!(
                "bucket {} has {} eligible subjects, {} short of {per_bucket}",
                bucket_name(b),
                members.len(),
                per_bucket - members.len()
            )));
        }
        members.shuffle(&mut rng);
        ids.extend(members[..per_bucket].iter().map(|s| s.id.clone()));
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagModel {
    pub label: String,
    pub probe: LinearProbe,
    pub bucket_edges: Vec<f64>,
    pub fit_ids: Vec<String>,
}

fn ages_by_id(subjects: &[Subject]) -> HashMap<&str, f64> {
    subjects.iter().map(|s| (s.id.as_str(), s.age)).collect()
}

fn lookup_age(ages: &HashMap<&str, f64>, id: &str) -> Result<f64> {
    ages.get(id)
        .copied()
        .ok_or_else(|| LabError::invalid(format!("no age for subject {id}")))
}

/// Ridge regression of age on standardized features over `subset`.
pub fn fit_bag_model(
    label: &str,
    features: &FeatureTable,
    subjects: &[Subject],
    subset: &[String],
    penalty: f64,
) -> Result<BagModel> {
    let ages = ages_by_id(subjects);
    let x = features.aligned_subset(subset)?;
    let y = subset
        .iter()
        .map(|id| lookup_age(&ages, id))
        .collect::<Result<Vec<_>>>()?;
    let settings = ProbeSettings {
        reg: penalty,
        ..Default::default()
    };
    let probe = fit_linear_probe(&x, &y, ProbeKind::Regression, &settings)?;
    Ok(BagModel {
        label: label.to_string(),
        probe,
        bucket_edges: AGE_BINS.iter().copied().chain([AGE_BINS[3] + 10.0]).collect(),
        fit_ids: subset.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasBasis {
    #[default]
    Linear,
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagRow {
    pub id: String,
    pub age: f64,
    pub predicted_age: f64,
    pub raw_bag: f64,
    pub debiased_bag: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagTable {
    pub label: String,
    pub rows: Vec<BagRow>,
}

impl BagTable {
    pub fn ages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.age).collect()
    }

    pub fn debiased(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.debiased_bag).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,predicted_age,raw_bag,debiased_bag\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.id,
                fmt_f64(r.predicted_age),
                fmt_f64(r.raw_bag),
                fmt_f64(r.debiased_bag)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Builds a table from predictions, debiasing against age.
    pub fn from_predictions(
        label: &str,
        ids: Vec<String>,
        ages: &[f64],
        predicted: &[f64],
        basis: DebiasBasis,
    ) -> Result<Self> {
        if ids.len() != ages.len() || ages.len() != predicted.len() {
            return Err(LabError::invalid("ids, ages and predictions differ in length"));
        }
        let raw: Vec<f64> = predicted.iter().zip(ages).map(|(p, a)| p - a).collect();
        let debiased = debias(&raw, ages, basis)?;
        let rows = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| BagRow {
                id,
                age: ages[i],
                predicted_age: predicted[i],
                raw_bag: raw[i],
                debiased_bag: debiased[i],
            })
            .collect();
        Ok(Self {
            label: label.to_string(),
            rows,
        })
    }
}

/// Residual of `values` after least squares on `(1, age[, age^2])`.
/// Uses modified Gram-Schmidt with one reorthogonalization pass.
pub fn debias(values: &[f64], ages: &[f64], basis: DebiasBasis) -> Result<Vec<f64>> {
    let n = ages.len();
    if values.len() != n {
        return Err(LabError::invalid("debias: length mismatch"));
    }
    if n < 3 || ages.iter().all(|&a| a == ages[0]) {
        return Err(LabError::invalid("debiasing needs at least 3 subjects with non-constant ages"));
    }
    let mean = ages.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = ages.iter().map(|a| a - mean).collect();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n], z.clone()];
    if basis == DebiasBasis::Quadratic {
        cols.push(z.iter().map(|v| v * v).collect());
    }
    let mut q: Vec<Vec<f64>> = Vec::new();
    for mut c in cols {
        for _ in 0..2 {
            for u in &q {
                project_out(&mut c, u);
            }
        }
        let norm = dot(&c, &c).sqrt();
        if norm == 0.0 {
            return Err(LabError::invalid("debiasing basis is rank deficient"));
        }
        c.iter_mut().for_each(|v| *v /= norm);
        q.push(c);
    }
    let mut r = values.to_vec();
    for _ in 0..2 {
        for u in &q {
            project_out(&mut r, u);
        }
    }
    Ok(r)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out(v: &mut [f64], unit: &[f64]) {
    let c = dot(v, unit);
    v.iter_mut().zip(unit).for_each(|(x, u)| *x -= c * u);
}

/// Predicts age for every row of `features` and debiases the gap.
/// Subjects used to fit the model are rejected.
pub fn compute_bag(
    model: &BagModel,
    features: &FeatureTable,
    subjects: &[Subject],
    basis: DebiasBasis,
) -> Result<BagTable> {
    let fit: BTreeSet<&str> = model.fit_ids.iter().map(String::as_str).collect();
    let overlap: Vec<&str> = features
        .ids
        .iter()
        .map(String::as_str)
        .filter(|id| fit.contains(id))
        .take(5)
        .collect();
    if !overlap.is_empty() {
        return Err(LabError::invalid(format!(
            "evaluation subjects overlap the fitting subset: {}",
            overlap.join(", ")
        )));
    }
    let ages = ages_by_id(subjects);
    let y = features
        .ids
        .iter()
        .map(|id| lookup_age(&ages, id))
        .collect::<Result<Vec<_>>>()?;
    let pred = model.probe.predict(&features.features)?;
    BagTable::from_predictions(&model.label, features.ids.clone(), &y, &pred, basis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagFitMetrics {
    pub label: String,
    pub n: usize,
    pub mae: f64,
    /// `None` when predictions are constant.
    pub pearson_r: Option<f64>,
}

pub fn bag_fit_metrics(table: &BagTable) -> Result<BagFitMetrics> {
    let n = table.rows.len();
    if n < 2 {
        return Err(LabError::invalid("fit metrics need at least 2 subjects"));
    }
    let mae = table.rows.iter().map(|r| (r.predicted_age - r.age).abs()).sum::<f64>() / n as f64;
    let pred: Vec<f64> = table.rows.iter().map(|r| r.predicted_age).collect();
    Ok(BagFitMetrics {
        label: table.label.clone(),
        n,
        mae,
        pearson_r: pearson(&pred, &table.ages()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub n_subjects: usize,
    pub values: Vec<Vec<f64>>,
}

/// Pearson correlations of debiased gaps over the shared subject ids.
pub fn cross_bag_correlation(tables: &[BagTable]) -> Result<CorrelationMatrix> {
    if tables.is_empty() {
        return Err(LabError::invalid("no BAG tables given"));
    }
    let mut shared: BTreeSet<&str> = tables[0].rows.iter().map(|r| r.id.as_str()).collect();
    for t in &tables[1..] {
        let ids: BTreeSet<&str> = t.rows.iter().map(|r| r.id.as_str()).collect();
        shared = shared.intersection(&ids).copied().collect();
    }
    if shared.is_empty() {
        return Err(LabError::invalid("BAG tables share no subject ids"));
    }
    let series: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| {
            let by_id: HashMap<&str, f64> = t.rows.iter().map(|r| (r.id.as_str(), r.debiased_bag)).collect();
            shared.iter().map(|id| by_id[id]).collect()
        })
        .collect();
    let k = tables.len();
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let r = pearson(&series[i], &series[j]).ok_or_else(|| {
                LabError::invalid(format!(
                    "correlation of {} and {} is undefined (constant BAG)",
                    tables[i].label, tables[j].label
                ))
            })?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        labels: tables.iter().map(|t| t.label.clone()).collect(),
        n_subjects: shared.len(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationEntry {
    pub outcome: String,
    pub n: usize,
    pub slope: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub adjusted_p: Option<f64>,
    pub fdr_significant: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub bag: String,
    pub alpha: f64,
    pub entries: Vec<AssociationEntry>,
}

/// Slope t-test of `y` on `x`; returns (slope, t, two-sided p).
pub fn slope_test(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(LabError::invalid("slope test needs at least 3 paired values"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::invalid("slope test: regressor is constant"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let df = (n - 2) as f64;
    let se = (sse / df / sxx).sqrt();
    if se == 0.0 {
        return Ok((slope, f64::INFINITY.copysign(slope), 0.0));
    }
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| LabError::invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok((slope, t, p))
}

/// Regresses each outcome on the debiased gap, then applies BH across the
/// outcomes that could be tested. Constant outcomes are skipped with a
/// warning entry.
pub fn bag_outcome_association(
    table: &BagTable,
    outcomes: &BTreeMap<String, HashMap<String, f64>>,
    alpha: f64,
) -> Result<AssociationReport> {
    let mut entries = Vec::new();
    let mut tested = Vec::new();
    for (name, values) in outcomes {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in &table.rows {
            if let Some(&v) = values.get(&r.id) {
                x.push(r.debiased_bag);
                y.push(v);
            }
        }
        let mut e = AssociationEntry {
            outcome: name.clone(),
            n: y.len(),
            slope: None,
            t: None,
            p: None,
            adjusted_p: None,
            fdr_significant: None,
            warning: None,
        };
        if y.len() < 3 {
            e.warning = Some("fewer than 3 subjects with this outcome".into());
        } else if y.iter().all(|&v| v == y[0]) {
            e.warning = Some("outcome is constant; skipped".into());
        } else {
            let (slope, t, p) = slope_test(&x, &y)?;
            e.slope = Some(slope);
            e.t = Some(t);
            e.p = Some(p);
            tested.push(entries.len());
        }
        entries.push(e);
    }
    let pvals: Vec<f64> = tested.iter().map(|&i| entries[i].p.unwrap_or(1.0)).collect();
    let fdr = bh_fdr(&pvals, alpha)?;
    for (k, &i) in tested.iter().enumerate() {
        entries[i].adjusted_p = Some(fdr.adjusted[k]);
        entries[i].fdr_significant = Some(fdr.rejected[k]);
    }
    Ok(AssociationReport {
        bag: table.label.clone(),
        alpha,
        entries,
    })
}

impl FeatureTable {
    /// Rows for `ids`, in that order; each id must be present.
    pub fn aligned_subset(&self, ids: &[String]) -> Result<DenseMatrix> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let missing: Vec<&str> = ids
            .iter()
            .map(String::as_str)
            .filter(|id| !pos.contains_key(id))
            .take(5)
            .collect();
        if !missing.is_empty() {
            return Err(LabError::invalid(format!(
                "feature table lacks subjects: {}",
                missing.join(", ")
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|id| pos[id.as_str()]).collect();
        Ok(self.features.select_rows(&idx))
    }

    /// The rows not listed in `exclude`, keeping table order.
    pub fn without(&self, exclude: &[String]) -> Result<FeatureTable> {
        let ex: BTreeSet<&str> = exclude.iter().map(String::as_str).collect();
        let keep: Vec<usize> = (0..self.ids.len()).filter(|&i| !ex.contains(self.ids[i].as_str())).collect();
        FeatureTable::new(
            keep.iter().map(|&i| self.ids[i].clone()).collect(),
            self.features.select_rows(&keep),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ages(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(44.0..84.0)).collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i}")).collect()
    }

    #[test]
    fn buckets_cover_the_default_ranges() {
        assert_eq!(bucket_of(44.0, 0), Some(0));
        assert_eq!(bucket_of(53.99, 1), Some(1));
        assert_eq!(bucket_of(54.0, 0), Some(2));
        assert_eq!(bucket_of(83.5, 1), Some(7));
        assert_eq!(bucket_of(84.0, 0), None);
        assert_eq!(bucket_of(43.0, 0), None);
        assert_eq!(bucket_name(7), "74-83/M");
    }

    #[test]
    fn debiased_gap_is_orthogonal_to_age() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let a = ages(200, seed);
            let pred: Vec<f64> = a
                .iter()
                .map(|x| 0.6 * x + 25.0 + 5.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            for basis in [DebiasBasis::Linear, DebiasBasis::Quadratic] {
                let t = BagTable::from_predictions("x", ids(200), &a, &pred, basis).unwrap();
                let r = pearson(&t.debiased(), &a).unwrap();
                assert!(r.abs() < 1e-10, "{r}");
            }
        }
    }

    #[test]
    fn exact_cases_give_zero_gaps() {
        let a = ages(50, 3);
        let t = BagTable::from_predictions("p", ids(50), &a, &a, DebiasBasis::Linear).unwrap();
        assert!(t.rows.iter().all(|r| r.raw_bag == 0.0 && r.debiased_bag == 0.0));
        let pred: Vec<f64> = a.iter().map(|x| x + 2.0 * x + 5.0).collect();
        let t = BagTable::from_predictions("l", ids(50), &a, &pred, DebiasBasis::Linear).unwrap();
        assert!(t.rows.iter().all(|r| r.debiased_bag.abs() < 1e-11), "{:?}", &t.rows[0]);
        assert!(debias(&[1.0, 2.0, 3.0], &[60.0; 3], DebiasBasis::Linear).is_err());
    }

    #[test]
    fn fit_metrics_hand_case() {
        let t = BagTable::from_predictions("h", ids(2), &[60.0, 70.0], &[62.0, 69.0], DebiasBasis::Linear);
        // two subjects cannot be debiased
        assert!(t.is_err());
        let table = BagTable {
            label: "h".into(),
            rows: vec![
                BagRow { id: "a".into(), age: 60.0, predicted_age: 62.0, raw_bag: 2.0, debiased_bag: 0.0 },
                BagRow { id: "b".into(), age: 70.0, predicted_age: 69.0, raw_bag: -1.0, debiased_bag: 0.0 },
            ],
        };
        let m = bag_fit_metrics(&table).unwrap();
        assert_eq!(m.mae, 1.5);
        assert_eq!(m.pearson_r, Some(1.0));
    }

    #[test]
    fn balanced_subset_and_shortfall() {
        let subjects: Vec<Subject> = (0..80)
            .map(|i| Subject {
                id: format!("S{i}"),
                age: 44.0 + 10.0 * (i % 4) as f64 + 0.5,
                sex: ((i / 4) % 2) as u8,
                stage: 0.0,
                hidden: 0.0,
                diagnosis: crate::synthgen::Diagnosis::CN,
                amyloid: false,
                converted: [false; 3],
            })
            .collect();
        assert_eq!(select_balanced_subset(&subjects, 1, 0).unwrap().len(), 8);
        assert_eq!(
            select_balanced_subset(&subjects, 4, 7).unwrap(),
            select_balanced_subset(&subjects, 4, 7).unwrap()
        );
        let err = select_balanced_subset(&subjects, 12, 0).unwrap_err().to_string();
        assert!(err.contains("44-53/F") && err.contains("2 short"), "{err}");
    }

    #[test]
    fn correlation_matrix_shape() {
        let a = ages(100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tables: Vec<BagTable> = (0..3)
            .map(|k| {
                let pred: Vec<f64> = a.iter().map(|x| x + rng.random_range(-5.0..5.0)).collect();
                BagTable::from_predictions(&format!("b{k}"), ids(100), &a, &pred, DebiasBasis::Linear).unwrap()
            })
            .collect();
        let m = cross_bag_correlation(&tables).unwrap();
        for i in 0..3 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
        let self_corr = cross_bag_correlation(&[tables[0].clone(), tables[0].clone()]).unwrap();
        assert_eq!(self_corr.values[0][1], 1.0);
        let other = BagTable { label: "x".into(), rows: vec![] };
        assert!(cross_bag_correlation(&[tables[0].clone(), other]).is_err());
    }

    #[test]
    fn outcome_association_flags() {
        let a = ages(120, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<f64> = a.iter().map(|x| x + rng.random_range(-5.0..5.0)).collect();
        let t = BagTable::from_predictions("b", ids(120), &a, &pred, DebiasBasis::Linear).unwrap();
        let mut outcomes = BTreeMap::new();
        outcomes.insert("self".to_string(), t.rows.iter().map(|r| (r.id.clone(), r.debiased_bag)).collect());
        outcomes.insert("flat".to_string(), t.rows.iter().map(|r| (r.id.clone(), 1.0)).collect());
        let rep = bag_outcome_association(&t, &outcomes, 0.05).unwrap();
        let flat = &rep.entries[0];
        assert!(flat.warning.is_some() && flat.p.is_none());
        let own = &rep.entries[1];
        assert!(own.p.unwrap() < 1e-12);
        assert_eq!(own.fdr_significant, Some(true));
    }
}
