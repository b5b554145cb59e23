use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::AugmentConfig;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rnce,
    Simclr,
    Barlow,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rnce, Method::Simclr, Method::Barlow];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rnce => "rnce",
            Method::Simclr => "simclr",
            Method::Barlow => "barlow",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::invalid(format!("unknown method {s:?}; expected rnce, simclr or barlow")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Patch,
    Aggregate,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Patch => "patch",
            Level::Aggregate => "aggregate",
        })
    }
}

impl FromStr for Level {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Level::Patch),
            "aggregate" => Ok(Level::Aggregate),
            _ => Err(LabError::invalid(format!("unknown level {s:?}; expected patch or aggregate"))),
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub level: Level,
    pub learning_rate: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ridge: f64,
    pub aux_weight: f64,
    /// Divide the auxiliary term by `rows * d1`.
    pub normalize_aux: bool,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Patch-level view augmentation; unused at the aggregate level.
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Probability that a region lands in the first subset.
    #[serde(default = "half")]
    pub subset_prob: f64,
}

fn half() -> f64 {
    0.5
}

impl TrainConfig {
    /// Grid-searched defaults per method and level.
    pub fn defaults(method: Method, level: Level) -> Self {
        let (lr, batch, steps) = match (method, level) {
            (Method::Rnce, Level::Patch) => (3.0e-5, 128, 2000),
            (_, Level::Patch) => (3.0e-4, 128, 2000),
            (_, Level::Aggregate) => (3.0e-5, 256, 1000),
        };
        Self {
            method,
            level,
            learning_rate: lr,
            temperature: 0.5,
            lambda: 5.0e-3,
            batch_size: batch,
            steps,
            ridge: 1e-6,
            aux_weight: 1.0,
            normalize_aux: false,
            seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            subset_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::invalid("learning_rate must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(LabError::invalid("temperature must be positive"));
        }
        if !(self.lambda >= 0.0 && self.ridge >= 0.0 && self.aux_weight >= 0.0) {
            return Err(LabError::invalid("lambda, ridge and aux_weight must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(LabError::invalid("batch_size must be at least 2"));
        }
        if !(self.subset_prob > 0.0 && self.subset_prob < 1.0) {
            return Err(LabError::invalid("subset_prob must lie in (0, 1)"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(LabError::invalid("adam betas must lie in [0, 1) and eps > 0"));
        }
        self.augment.validate()
    }

    /// Batch size clipped to `available` subjects, with the rank
    /// prerequisite `2B > max(d1, d2)` re-checked for R-NCE.
    pub fn effective_batch(&self, available: usize, d1: usize, d2: usize) -> Result<usize> {
        let b = self.batch_size.min(available);
        if b < 2 {
            return Err(LabError::invalid(format!(
                "need at least 2 training subjects, have {available}"
            )));
        }
        if self.method == Method::Rnce && 2 * b <= d1.max(d2) {
            return Err(LabError::invalid(format!(
                "batch of {b} images gives {} rows, rank prerequisite needs more than max(d1 = {d1}, d2 = {d2})",
                2 * b
            )));
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let r = TrainConfig::defaults(Method::Rnce, Level::Patch);
        assert_eq!((r.learning_rate, r.temperature, r.batch_size), (3.0e-5, 0.5, 128));
        let s = TrainConfig::defaults(Method::Simclr, Level::Patch);
        assert_eq!((s.learning_rate, s.batch_size), (3.0e-4, 128));
        let b = TrainConfig::defaults(Method::Barlow, Level::Patch);
        assert_eq!((b.learning_rate, b.lambda), (3.0e-4, 5.0e-3));
        for m in Method::ALL {
            let a = TrainConfig::defaults(m, Level::Aggregate);
            assert_eq!((a.learning_rate, a.batch_size, a.steps), (3.0e-5, 256, 1000));
        }
    }

    #[test]
    fn batch_is_clipped_and_rank_checked() {
        let c = TrainConfig::defaults(Method::Rnce, Level::Aggregate);
        assert_eq!(c.effective_batch(100, 12, 64).unwrap(), 100);
        assert!(c.effective_batch(30, 12, 64).is_err());
        let s = TrainConfig::defaults(Method::Simclr, Level::Aggregate);
        assert_eq!(s.effective_batch(30, 12, 64).unwrap(), 30);
    }

    #[test]
    fn names_parse() {
        assert_eq!("barlow".parse::<Method>().unwrap(), Method::Barlow);
        assert!("byol".parse::<Method>().is_err());
        assert_eq!("aggregate".parse::<Level>().unwrap(), Level::Aggregate);
    }
}
