use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evalstats::metrics::r_squared;
use crate::evalstats::task::ProbeKind;
use crate::matrix::{spd_solve, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    /// L2 penalty on the (standardized) weights; the intercept is free.
    pub reg: f64,
    /// Gradient-descent iterations for binary probes.
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            iterations: 500,
            learning_rate: 0.1,
        }
    }
}

/// Per-column affine map to zero mean and unit (population) variance.
/// Constant columns map to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// `1 / std`, or 0 for a constant column.
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseMatrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean = x.column_means().into_data();
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let inv_std = var
            .iter()
            .map(|&v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.mean.len() {
            return Err(LabError::ShapeMismatch {
                op: "standardize",
                lhs: x.shape(),
                rhs: (1, self.mean.len()),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.inv_std[j];
            }
        }
        Ok(out)
    }
}

pub fn standardize_columns(x: &DenseMatrix) -> DenseMatrix {
    let s = Standardizer::fit(x);
    s.apply(x).expect("fitted on the same matrix")
}

/// A fitted linear probe over standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub kind: ProbeKind,
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearProbe {
    /// Regression predictions, or logits for binary probes.
    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        let z = self.standardizer.apply(x)?;
        Ok((0..z.rows())
            .map(|i| dot(z.row(i), &self.weights) + self.intercept)
            .collect())
    }

    /// Weights and intercept expressed on the raw feature scale.
    pub fn raw_weights(&self) -> (Vec<f64>, f64) {
        let s = &self.standardizer;
        let w: Vec<f64> = self.weights.iter().zip(&s.inv_std).map(|(w, k)| w * k).collect();
        let b = self.intercept - dot(&w, &s.mean);
        (w, b)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Fits a ridge regression (closed form) or an L2 logistic regression
/// (full-batch gradient descent) on standardized features.
pub fn fit_linear_probe(
    features: &DenseMatrix,
    labels: &[f64],
    kind: ProbeKind,
    settings: &ProbeSettings,
) -> Result<LinearProbe> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(LabError::invalid(format!(
            "probe: {n} feature rows but {} labels",
            labels.len()
        )));
    }
    if !(settings.reg >= 0.0 && settings.reg.is_finite()) {
        return Err(LabError::invalid("probe regularization must be >= 0"));
    }
    if labels.iter().any(|y| !y.is_finite()) {
        return Err(LabError::NonFinite("probe labels"));
    }
    let standardizer = Standardizer::fit(features);
    let z = standardizer.apply(features)?;
    let (weights, intercept) = match kind {
        ProbeKind::Regression => {
            if n < d + 1 {
                return Err(LabError::invalid(format!(
                    "regression probe needs at least {} samples, got {n}",
                    d + 1
                )));
            }
            fit_ridge(&z, &standardizer, labels, settings.reg)?
        }
        ProbeKind::Binary => {
            let pos = labels.iter().filter(|&&y| y == 1.0).count();
            if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(LabError::invalid("binary labels must be 0 or 1"));
            }
            if pos < 2 || n - pos < 2 {
                return Err(LabError::invalid(format!(
                    "binary probe needs at least 2 samples per class, got {pos} positive and {} negative",
                    n - pos
                )));
            }
            fit_logistic(&z, labels, settings)
        }
    };
    Ok(LinearProbe {
        kind,
        standardizer,
        weights,
        intercept,
    })
}

/// Mean held-out R² of per-column ridge maps from `x` to `y`, fit on the
/// train pair and scored on the test pair.
pub fn recovery_r2(
    x_train: &DenseMatrix,
    y_train: &DenseMatrix,
    x_test: &DenseMatrix,
    y_test: &DenseMatrix,
    settings: &ProbeSettings,
) -> Result<f64> {
    if y_train.cols() == 0 || y_train.cols() != y_test.cols() {
        return Err(LabError::invalid(format!(
            "recovery targets need matching non-zero widths, got {} and {}",
            y_train.cols(),
            y_test.cols()
        )));
    }
    let mut total = 0.0;
    for j in 0..y_train.cols() {
        let probe = fit_linear_probe(x_train, &y_train.col_vec(j), ProbeKind::Regression, settings)?;
        total += r_squared(&probe.predict(x_test)?, &y_test.col_vec(j))?;
    }
    Ok(total / y_train.cols() as f64)
}

fn fit_ridge(z: &DenseMatrix, s: &Standardizer, y: &[f64], reg: f64) -> Result<(Vec<f64>, f64)> {
    let d = z.cols();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let active: Vec<usize> = (0..d).filter(|&j| s.inv_std[j] > 0.0).collect();
    let mut weights = vec![0.0; d];
    if !active.is_empty() {
        let za = z.select_cols(&active);
        let yc = DenseMatrix::column(&y.iter().map(|v| v - ybar).collect::<Vec<_>>());
        let mut g = za.transpose().matmul(&za)?;
        for k in 0..active.len() {
            g.set(k, k, g.get(k, k) + reg);
        }
        let w = spd_solve(&g, &za.transpose().matmul(&yc)?)?;
        for (k, &j) in active.iter().enumerate() {
            weights[j] = w.get(k, 0);
        }
    }
    // z has centered columns: intercept = mean(y)
    Ok((weights, ybar))
}

fn fit_logistic(z: &DenseMatrix, y: &[f64], settings: &ProbeSettings) -> (Vec<f64>, f64) {
    let (n, d) = z.shape();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut grad = vec![0.0; d];
    let inv_n = 1.0 / n as f64;
    for _ in 0..settings.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (i, yi) in y.iter().enumerate() {
            let row = z.row(i);
            let r = sigmoid(dot(row, &w) + b) - yi;
            grad_b += r;
            for (g, x) in grad.iter_mut().zip(row) {
                *g += r * x;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= settings.learning_rate * (gj * inv_n + settings.reg * *wj);
        }
        b -= settings.learning_rate * grad_b * inv_n;
    }
    (w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_regression_recovers_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::from_fn(50, 4, |_, _| rng.random_range(-2.0..2.0));
        let truth = [1.5, -0.25, 3.0, 0.0];
        let y: Vec<f64> = (0..50).map(|i| dot(x.row(i), &truth) + 7.0).collect();
        let s = ProbeSettings {
            reg: 0.0,
            ..Default::default()
        };
        let p = fit_linear_probe(&x, &y, ProbeKind::Regression, &s).unwrap();
        let (w, b) = p.raw_weights();
        for (a, t) in w.iter().zip(truth) {
            assert!((a - t).abs() < 1e-6, "{w:?}");
        }
        assert!((b - 7.0).abs() < 1e-6);
    }

    #[test]
    fn separable_pair_is_classified() {
        let x = DenseMatrix::from_rows(&[[-1.0], [-0.9], [1.0], [1.1]]).unwrap();
        let y = [0.0, 0.0, 1.0, 1.0];
        let p = fit_linear_probe(&x, &y, ProbeKind::Binary, &ProbeSettings::default()).unwrap();
        let pred = p.predict(&x).unwrap();
        for (s, t) in pred.iter().zip(y) {
            assert_eq!(f64::from(u8::from(*s > 0.0)), t);
        }
    }

    #[test]
    fn constant_column_gets_zero_weight() {
        let x = DenseMatrix::from_rows(&[[5.0, -1.0], [5.0, -0.5], [5.0, 0.5], [5.0, 1.0]]).unwrap();
        let y = [0.0, 0.0, 1.0, 1.0];
        for kind in [ProbeKind::Binary, ProbeKind::Regression] {
            let p = fit_linear_probe(&x, &y, kind, &ProbeSettings::default()).unwrap();
            assert_eq!(p.weights[0], 0.0);
            assert!(p.weights[1] > 0.0);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DenseMatrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let err = fit_linear_probe(&x, &[1.0; 3], ProbeKind::Binary, &ProbeSettings::default());
        assert!(err.is_err());
    }
}
