use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::layout::{Region, RegionLayout};
use crate::encoder::params::{AggregatorParams, EncoderConfig, PatchEncoderParams};
use crate::error::{LabError, Result};
use crate::io::{read_json, write_json};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCheckpoint {
    pub version: u32,
    pub region: Region,
    pub config: EncoderConfig,
    pub params: PatchEncoderParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorCheckpoint {
    pub version: u32,
    pub layout: RegionLayout,
    pub config: EncoderConfig,
    pub params: AggregatorParams,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn check_version(path: &Path) -> Result<()> {
    let probe: VersionProbe = read_json(path)?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(LabError::Schema {
            path: path.to_path_buf(),
            found: probe.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

impl PatchCheckpoint {
    pub fn new(region: Region, config: EncoderConfig, params: PatchEncoderParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            region,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        check_version(path)?;
        read_json(path)
    }
}

impl AggregatorCheckpoint {
    pub fn new(layout: RegionLayout, config: EncoderConfig, params: AggregatorParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            layout,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        check_version(path)?;
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::{ModelParams, ParamSet};

    #[test]
    fn round_trip_is_bit_exact() {
        let layout = RegionLayout::standard(24);
        let cfg = EncoderConfig::default();
        let model = ModelParams::init(&layout, &cfg, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let p = dir.path().join("patch.json");
        let ck = PatchCheckpoint::new(layout.region(4).clone(), cfg.clone(), model.patches[4].clone());
        ck.save(&p).unwrap();
        let back = PatchCheckpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.checksum(), model.patches[4].checksum());

        let a = dir.path().join("agg.json");
        let ck = AggregatorCheckpoint::new(layout, cfg, model.aggregator.clone());
        ck.save(&a).unwrap();
        assert_eq!(AggregatorCheckpoint::load(&a).unwrap().params.checksum(), model.aggregator.checksum());
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("old.json");
        std::fs::write(&p, br#"{"version": 0}"#).unwrap();
        match PatchCheckpoint::load(&p) {
            Err(LabError::Schema { found: 0, expected: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
