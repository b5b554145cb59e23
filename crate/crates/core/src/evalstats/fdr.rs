use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub alpha: f64,
    pub rejected: Vec<bool>,
    /// Benjamini-Hochberg adjusted p-values, in input order.
    pub adjusted: Vec<f64>,
}

/// Benjamini-Hochberg step-up procedure.
pub fn bh_fdr(pvals: &[f64], alpha: f64) -> Result<FdrResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(LabError::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(LabError::invalid(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));

    let mut cutoff = 0;
    for (rank, &i) in order.iter().enumerate() {
        if pvals[i] <= alpha * (rank + 1) as f64 / m as f64 {
            cutoff = rank + 1;
        }
    }
    let mut rejected = vec![false; m];
    for &i in &order[..cutoff] {
        rejected[i] = true;
    }

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(pvals[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.max(pvals[i]);
    }
    Ok(FdrResult {
        alpha,
        rejected,
        adjusted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_example() {
        let r = bh_fdr(&[0.01, 0.02, 0.03, 0.2], 0.05).unwrap();
        assert_eq!(r.rejected, vec![true, true, true, false]);
        assert!((r.adjusted[0] - 0.04).abs() < 1e-15);
        assert!((r.adjusted[2] - 0.04).abs() < 1e-15);
        assert!((r.adjusted[3] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn edge_cases() {
        assert_eq!(bh_fdr(&[1.0; 5], 0.05).unwrap().rejected, vec![false; 5]);
        assert_eq!(bh_fdr(&[0.04], 0.05).unwrap().rejected, vec![true]);
        assert!(bh_fdr(&[1.2], 0.05).is_err());
        assert!(bh_fdr(&[], 0.05).unwrap().rejected.is_empty());
    }

    #[test]
    fn step_up_rescues_earlier_ranks() {
        // 0.03 alone misses 0.05/3 but the largest p meets its threshold
        let r = bh_fdr(&[0.049, 0.03, 0.04], 0.05).unwrap();
        assert_eq!(r.rejected, vec![true; 3]);
    }
}
