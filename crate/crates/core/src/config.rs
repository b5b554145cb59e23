//! The unified run configuration read by every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brainage::DebiasBasis;
use crate::encoder::{AugmentConfig, EncoderConfig};
use crate::error::{LabError, Result};
use crate::evalstats::{CompareConfig, ProbeTask};
use crate::io::line_col_offset;
use crate::synthgen::CohortConfig;
use crate::trainer::{AdamConfig, Level, Method, TrainConfig};

/// Partial training settings; unset fields keep the per-method defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverride {
    pub learning_rate: Option<f64>,
    pub temperature: Option<f64>,
    pub lambda: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub ridge: Option<f64>,
    pub aux_weight: Option<f64>,
    pub normalize_aux: Option<bool>,
    pub adam: Option<AdamConfig>,
    pub augment: Option<AugmentConfig>,
    pub subset_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub tasks: Vec<ProbeTask>,
    /// Method names plus `aux` for the auxiliary-feature baseline.
    pub feature_sets: Vec<String>,
    pub compare: CompareConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            tasks: ProbeTask::ALL.to_vec(),
            feature_sets: ["rnce", "simclr", "barlow", "aux"].map(String::from).to_vec(),
            compare: CompareConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BagSection {
    pub feature_sets: Vec<String>,
    pub per_bucket: usize,
    pub penalty: f64,
    pub basis: DebiasBasis,
    pub alpha: f64,
}

impl Default for BagSection {
    fn default() -> Self {
        Self {
            feature_sets: ["rnce", "aux", "simclr"].map(String::from).to_vec(),
            per_bucket: 400,
            penalty: 1e-4,
            basis: DebiasBasis::Linear,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed for data, initialization, batching and resampling.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Keyed `"<method>.<level>"`, e.g. `"rnce.patch"`.
    #[serde(default)]
    pub train: BTreeMap<String, TrainOverride>,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub bag: BagSection,
}

pub const FEATURE_SET_AUX: &str = "aux";

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            output_dir: None,
            data_dir: None,
            workers: None,
            cohort: CohortConfig::default(),
            encoder: EncoderConfig::default(),
            train: BTreeMap::new(),
            probe: ProbeSection::default(),
            bag: BagSection::default(),
        }
    }

    /// Reads a config file. A missing file maps to [`LabError::Missing`].
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(LabError::Missing(format!("config file {} not found", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| LabError::Parse {
            path: path.to_path_buf(),
            offset: line_col_offset(&bytes, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Propagates the global seed and shared sizes, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.cohort.seed = self.seed;
        self.cohort.representation_dim = self.encoder.embed_dim;
        self.probe.compare.bootstrap.seed = self.seed;
        self.probe.compare.perm_seed = self.seed;
        self.cohort.validate()?;
        self.encoder.validate()?;
        for key in self.train.keys() {
            parse_train_key(key)?;
        }
        for name in self.probe.feature_sets.iter().chain(&self.bag.feature_sets) {
            validate_feature_set(name)?;
        }
        if self.probe.feature_sets.is_empty() || self.probe.tasks.is_empty() {
            return Err(LabError::invalid("probe.feature_sets and probe.tasks must not be empty"));
        }
        if self.workers == Some(0) {
            return Err(LabError::invalid("workers must be positive"));
        }
        for m in Method::ALL {
            for l in [Level::Patch, Level::Aggregate] {
                self.train_config(m, l).validate()?;
            }
        }
        Ok(self)
    }

    pub fn train_config(&self, method: Method, level: Level) -> TrainConfig {
        let mut c = TrainConfig::defaults(method, level);
        c.seed = self.seed;
        if let Some(o) = self.train.get(&format!("{method}.{level}")) {
            macro_rules! take {
                ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { c.$f = v; } )* };
            }
            take!(learning_rate, temperature, lambda, batch_size, steps, ridge, aux_weight, normalize_aux, adam, augment, subset_prob);
        }
        c
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| LabError::invalid("no output directory: pass --out or set output_dir"))
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        match &self.data_dir {
            Some(d) => Ok(d.clone()),
            None => Ok(self.output_dir()?.join("data")),
        }
    }
}

fn parse_train_key(key: &str) -> Result<(Method, Level)> {
    let (m, l) = key
        .split_once('.')
        .ok_or_else(|| LabError::invalid(format!("train key {key:?} must look like \"rnce.patch\"")))?;
    Ok((m.parse()?, l.parse()?))
}

pub fn validate_feature_set(name: &str) -> Result<()> {
    if name == FEATURE_SET_AUX || name.parse::<Method>().is_ok() {
        Ok(())
    } else {
        Err(LabError::invalid(format!(
            "unknown feature set {name:?}; expected rnce, simclr, barlow or aux"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = serde_json::from_str::<RunConfig>("{}").unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn overrides_merge_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 4, "train": {"simclr.patch": {"steps": 5, "learning_rate": 0.01}}}"#,
        )
        .unwrap();
        let cfg = cfg.resolve().unwrap();
        let t = cfg.train_config(Method::Simclr, Level::Patch);
        assert_eq!((t.steps, t.learning_rate, t.batch_size, t.seed), (5, 0.01, 128, 4));
        assert_eq!(cfg.cohort.seed, 4);
        assert_eq!(cfg.train_config(Method::Rnce, Level::Patch).steps, 2000);
    }

    #[test]
    fn bad_keys_are_rejected() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 1, "train": {"byol.patch": {}}}"#).unwrap();
        assert!(cfg.resolve().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sed": 2}"#).is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(matches!(err, LabError::Missing(_)));
        assert!(err.to_string().contains("/nonexistent/run.json"));
    }
}
