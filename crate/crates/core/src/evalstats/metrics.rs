use crate::error::{LabError, Result};

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. Counting is exact in integers.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(LabError::invalid(format!(
            "auroc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(LabError::NonFinite("auroc scores"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(LabError::invalid("auroc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U statistic
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u64, 0u64);
        for &k in &order[i..j] {
            if labels[k] {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// `1 - SS_res / SS_tot`.
pub fn r_squared(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(LabError::invalid(format!(
            "r_squared: {} predictions but {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.len() < 2 {
        return Err(LabError::invalid("r_squared needs at least 2 samples"));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(LabError::invalid("r_squared: truths are constant"));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation; `None` when either input is constant or has fewer
/// than two values.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_cases() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.0, 0.1, 0.5, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn r_squared_hand_cases() {
        assert_eq!(r_squared(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0; 3], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(r_squared(&[1.0, 2.0], &[5.0, 5.0]).is_err());
    }

    #[test]
    fn pearson_extremes() {
        let x = [60.0, 65.0, 70.0, 75.0];
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(pearson(&x, &x), Some(1.0));
        assert!((pearson(&x, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&x, &[3.0; 4]), None);
    }

    #[test]
    fn mean_std_single_value() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
