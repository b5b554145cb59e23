use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tape;
use crate::encoder::{aggregate_views, AggregatorParams, EncoderConfig, ModelParams, ParamSet, PatchEncoderParams, RegionLayout, ViewItems};
use crate::error::{LabError, Result};
use crate::losses::AuxBatch;
use crate::matrix::DenseMatrix;
use crate::parallel::derive_seed;
use crate::synthgen::CohortSplit;
use crate::trainer::adam::Adam;
use crate::trainer::config::{Level, TrainConfig};
use crate::trainer::{at_step, checksum_hex, method_loss, optimizer_label, TrainReport};

/// How regions are divided between the two views of a subject.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SubsetSplit {
    /// Each region joins the first subset with probability `subset_prob`,
    /// once per batch; splits leaving a subset empty are redrawn.
    #[default]
    Random,
    /// Both views use every region.
    AllInBoth,
}

fn combined_checksum(patches: &[PatchEncoderParams]) -> u64 {
    patches
        .iter()
        .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.checksum())
}

/// Per-region embeddings of every subject in `split`, one n x d matrix each.
pub(crate) fn frozen_embeddings(
    split: &CohortSplit,
    layout: &RegionLayout,
    patches: &[PatchEncoderParams],
) -> Result<Vec<DenseMatrix>> {
    if patches.len() != layout.len() {
        return Err(LabError::Missing(format!(
            "{} patch encoders for {} regions",
            patches.len(),
            layout.len()
        )));
    }
    layout
        .regions()
        .iter()
        .enumerate()
        .map(|(l, region)| {
            let x = split.regions.get(l).ok_or_else(|| {
                LabError::invalid(format!("split has no features for region {}", region.name))
            })?;
            if x.rows() != split.len() {
                let who = split.subjects.get(x.rows()).map_or("?", |s| s.id.as_str());
                return Err(LabError::invalid(format!(
                    "subject {who} has no features for region {}",
                    region.name
                )));
            }
            patches[l].embed_rows(region, x)
        })
        .collect()
}

/// Trains the aggregator on frozen patch embeddings.
pub fn train_aggregator(
    split: &CohortSplit,
    layout: &RegionLayout,
    patches: &[PatchEncoderParams],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    subsets: SubsetSplit,
) -> Result<(AggregatorParams, TrainReport)> {
    if cfg.level != Level::Aggregate {
        return Err(LabError::invalid("train_aggregator needs level = aggregate"));
    }
    cfg.validate()?;
    let started = Instant::now();
    let frozen_before = combined_checksum(patches);
    let table = frozen_embeddings(split, layout, patches)?;
    let n = split.len();
    let n_regions = layout.len();
    let b = cfg.effective_batch(n, layout.aux_dim(), encoder.embed_dim)?;

    let mut params = ModelParams::init(layout, encoder, cfg.seed)?.aggregator;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA66));
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = Adam::new(cfg.learning_rate, cfg.adam.clone(), &shapes);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = sample(&mut rng, n, b).into_vec();
        let (s1, s2) = match subsets {
            SubsetSplit::AllInBoth => ((0..n_regions).collect(), (0..n_regions).collect()),
            SubsetSplit::Random => loop {
                let (a, c): (Vec<usize>, Vec<usize>) =
                    (0..n_regions).partition(|_| rng.random::<f64>() < cfg.subset_prob);
                if !a.is_empty() && !c.is_empty() {
                    break (a, c);
                }
            },
        };
        let mut rows = DenseMatrix::zeros(n_regions * b, encoder.embed_dim);
        for (l, e) in table.iter().enumerate() {
            for (k, &i) in batch.iter().enumerate() {
                rows.row_mut(l * b + k).copy_from_slice(e.row(i));
            }
        }
        let view = |set: &[usize], k: usize| -> ViewItems { set.iter().map(|&l| (l, l * b + k)).collect() };
        let views: Vec<ViewItems> = (0..b).flat_map(|k| [view(&s1, k), view(&s2, k)]).collect();
        let aux = if cfg.method == crate::trainer::Method::Rnce {
            let mask = |set: &[usize]| {
                let cols = layout.covered_columns(set);
                (0..layout.aux_dim()).map(|j| cols.contains(&j)).collect::<Vec<bool>>()
            };
            let (m1, m2) = (mask(&s1), mask(&s2));
            let coverage = (0..b).flat_map(|_| [m1.clone(), m2.clone()]).collect();
            Some(AuxBatch::duplicated(&split.aux.select_rows(&batch)).with_coverage(coverage)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true)?;
        let e = tape.constant(rows)?;
        let loss = at_step(
            (|| {
                let h = aggregate_views(&mut tape, &vars, encoder, e, &views)?;
                method_loss(&mut tape, cfg, h, aux.as_ref())
            })(),
            step,
            "aggregator",
        )?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(LabError::Diverged {
                step,
                context: "aggregator".into(),
            });
        }
        trace.push(value);
        let grads = at_step(tape.backward(loss), step, "aggregator")?;
        let g: Vec<&DenseMatrix> = vars.iter().map(|&id| grads.of(id)).collect();
        opt.step(params.tensors_mut(), &g)?;
    }

    let frozen_after = combined_checksum(patches);
    if frozen_after != frozen_before {
        return Err(LabError::invalid("patch encoders changed during aggregator training"));
    }
    let report = TrainReport {
        method: cfg.method,
        level: Level::Aggregate,
        region: None,
        seed: cfg.seed,
        optimizer: optimizer_label(cfg),
        batch_size: b,
        steps: cfg.steps,
        loss_trace: trace,
        params_checksum: checksum_hex(params.checksum()),
        frozen_checksum: Some(checksum_hex(frozen_after)),
        wall_time: started.elapsed(),
    };
    Ok((params, report))
}
