use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// A named region with its raw feature width and covered auxiliary columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub raw_dim: usize,
    pub aux_columns: Vec<usize>,
}

/// Ordered regions plus the width of the auxiliary feature vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    regions: Vec<Region>,
    aux_dim: usize,
}

/// Region families, one per hemisphere, with the per-hemisphere auxiliary
/// column each covers.
const FAMILIES: [(&str, usize); 9] = [
    ("mtl", 0),
    ("ltl", 0),
    ("occipital", 1),
    ("parietal", 2),
    ("subcortical", 3),
    ("cingulate", 4),
    ("medialfrontal", 4),
    ("posteriorfrontal", 5),
    ("anteriorfrontal", 5),
];

impl RegionLayout {
    pub fn new(regions: Vec<Region>, aux_dim: usize) -> Result<Self> {
        if regions.is_empty() {
            return Err(LabError::invalid("layout needs at least one region"));
        }
        let mut names = BTreeSet::new();
        let mut covered = BTreeSet::new();
        for r in &regions {
            if !names.insert(r.name.as_str()) {
                return Err(LabError::invalid(format!("duplicate region name {}", r.name)));
            }
            if r.raw_dim == 0 {
                return Err(LabError::invalid(format!("region {} has zero width", r.name)));
            }
            for &c in &r.aux_columns {
                if c >= aux_dim {
                    return Err(LabError::invalid(format!(
                        "region {} maps auxiliary column {c} outside [0, {aux_dim})",
                        r.name
                    )));
                }
                covered.insert(c);
            }
        }
        if covered.len() != aux_dim {
            let missing: Vec<usize> = (0..aux_dim).filter(|c| !covered.contains(c)).collect();
            return Err(LabError::invalid(format!(
                "auxiliary columns {missing:?} are not covered by any region"
            )));
        }
        Ok(Self { regions, aux_dim })
    }

    /// Eighteen regions (nine families per hemisphere), each `raw_dim` wide,
    /// over twelve auxiliary columns (six per hemisphere).
    pub fn standard(raw_dim: usize) -> Self {
        let mut regions = Vec::with_capacity(18);
        for (side, offset) in [("left", 0), ("right", 6)] {
            for (family, col) in FAMILIES {
                regions.push(Region {
                    name: format!("{side}_{family}"),
                    raw_dim,
                    aux_columns: vec![col + offset],
                });
            }
        }
        Self::new(regions, 12).expect("standard layout is valid")
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, index: usize) -> &Region {
        &self.regions[index]
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }

    /// Auxiliary columns covered by a set of regions, sorted and deduplicated.
    pub fn covered_columns(&self, regions: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = regions
            .iter()
            .flat_map(|&r| self.regions[r].aux_columns.iter().copied())
            .collect();
        set.into_iter().collect()
    }
}
