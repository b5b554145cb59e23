use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::DenseMatrix;

/// Feature-vector augmentation: `x' = s * (x ⊙ m) + η`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub dropout_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            dropout_prob: 0.2,
            scale_lo: 0.8,
            scale_hi: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            dropout_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(LabError::invalid(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(LabError::invalid(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(LabError::invalid(format!(
                "scale range must satisfy 0 < lo <= hi, got [{}, {}]",
                self.scale_lo, self.scale_hi
            )));
        }
        Ok(())
    }
}

/// Draws one augmented copy of `x`.
pub fn augment_vector<R: Rng + ?Sized>(x: &[f64], rng: &mut R, cfg: &AugmentConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = x.to_vec();
    augment_in_place(&mut out, rng, cfg);
    Ok(out)
}

pub(crate) fn augment_in_place<R: Rng + ?Sized>(x: &mut [f64], rng: &mut R, cfg: &AugmentConfig) {
    let s = cfg.scale_lo + (cfg.scale_hi - cfg.scale_lo) * rng.random::<f64>();
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    for v in x.iter_mut() {
        let keep = cfg.dropout_prob == 0.0 || rng.random::<f64>() >= cfg.dropout_prob;
        let masked = if keep { *v } else { 0.0 };
        let eta = if cfg.noise_std > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        *v = s * masked + eta;
    }
}

/// Augments every row of `x` independently.
pub fn augment_rows<R: Rng + ?Sized>(x: &DenseMatrix, rng: &mut R, cfg: &AugmentConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    let mut out = x.clone();
    for i in 0..out.rows() {
        augment_in_place(out.row_mut(i), rng, cfg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_config_is_identity() {
        let x = [0.5, -2.0, 3.25, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment_vector(&x, &mut rng, &AugmentConfig::identity()).unwrap(), x);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = [
            AugmentConfig { dropout_prob: 1.0, ..AugmentConfig::default() },
            AugmentConfig { noise_std: -0.1, ..AugmentConfig::default() },
            AugmentConfig { scale_lo: 0.0, ..AugmentConfig::default() },
            AugmentConfig { scale_lo: 2.0, scale_hi: 1.0, ..AugmentConfig::default() },
        ];
        for cfg in bad {
            assert!(augment_vector(&[1.0], &mut rng, &cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn seeded_rng_reproduces() {
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.3).collect();
        let cfg = AugmentConfig::default();
        let a = augment_vector(&x, &mut ChaCha8Rng::seed_from_u64(11), &cfg).unwrap();
        let b = augment_vector(&x, &mut ChaCha8Rng::seed_from_u64(11), &cfg).unwrap();
        assert_eq!(a, b);
        let c = augment_vector(&x, &mut ChaCha8Rng::seed_from_u64(12), &cfg).unwrap();
        assert_ne!(a, c);
    }
}
