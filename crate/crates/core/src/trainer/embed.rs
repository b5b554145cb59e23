use std::path::Path;

use crate::encoder::{AggregatorParams, EncoderConfig, PatchEncoderParams, RegionLayout, ViewItems};
use crate::error::Result;
use crate::evalstats::FeatureTable;
use crate::matrix::DenseMatrix;
use crate::synthgen::CohortSplit;
use crate::trainer::aggregate::frozen_embeddings;

const CHUNK: usize = 128;

/// Image-level and per-region representations keyed by subject id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub image: DenseMatrix,
    /// `(region name, n x d)` in layout order.
    pub regions: Vec<(String, DenseMatrix)>,
}

impl EmbeddingTable {
    pub fn image_table(&self) -> Result<FeatureTable> {
        FeatureTable::new(self.ids.clone(), self.image.clone())
    }

    pub fn region_table(&self, l: usize) -> Result<FeatureTable> {
        FeatureTable::new(self.ids.clone(), self.regions[l].1.clone())
    }

    /// `image.csv` plus `region_<name>.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.image_table()?.write_csv(&dir.join("image.csv"), "e")?;
        for (l, (name, _)) in self.regions.iter().enumerate() {
            self.region_table(l)?
                .write_csv(&dir.join(format!("region_{name}.csv")), "e")?;
        }
        Ok(())
    }
}

/// Augmentation-free forward pass over all regions of every subject.
pub fn embed_cohort(
    split: &CohortSplit,
    layout: &RegionLayout,
    patches: &[PatchEncoderParams],
    aggregator: &AggregatorParams,
    encoder: &EncoderConfig,
) -> Result<EmbeddingTable> {
    let per_region = frozen_embeddings(split, layout, patches)?;
    let n = split.len();
    let n_regions = layout.len();
    let mut image = DenseMatrix::zeros(n, encoder.embed_dim);
    for start in (0..n).step_by(CHUNK) {
        let c = CHUNK.min(n - start);
        let mut rows = DenseMatrix::zeros(n_regions * c, encoder.embed_dim);
        for (l, e) in per_region.iter().enumerate() {
            for k in 0..c {
                rows.row_mut(l * c + k).copy_from_slice(e.row(start + k));
            }
        }
        let views: Vec<ViewItems> = (0..c)
            .map(|k| (0..n_regions).map(|l| (l, l * c + k)).collect())
            .collect();
        let out = aggregator.embed_views(encoder, &rows, &views)?;
        for k in 0..c {
            image.row_mut(start + k).copy_from_slice(out.row(k));
        }
    }
    Ok(EmbeddingTable {
        ids: split.ids(),
        image,
        regions: layout
            .regions()
            .iter()
            .map(|r| r.name.clone())
            .zip(per_region)
            .collect(),
    })
}
