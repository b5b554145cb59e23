use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tape;
use crate::encoder::augment::augment_in_place;
use crate::encoder::{encode_patch_rows, EncoderConfig, ModelParams, ParamSet, PatchEncoderParams, RegionLayout};
use crate::error::{LabError, Result};
use crate::losses::AuxBatch;
use crate::matrix::DenseMatrix;
use crate::parallel::{derive_seed, try_map_indexed, ExecMode};
use crate::synthgen::CohortSplit;
use crate::trainer::adam::Adam;
use crate::trainer::config::{Level, TrainConfig};
use crate::trainer::{at_step, checksum_hex, method_loss, optimizer_label, TrainReport};

/// Trained encoders (layout order) with one report each.
#[derive(Clone, Debug)]
pub struct PatchTraining {
    pub params: Vec<PatchEncoderParams>,
    pub reports: Vec<TrainReport>,
}

/// Trains every region's encoder independently. Region `l` initializes
/// and samples from streams seeded with `seed ^ l`, so the result does not
/// depend on `mode` or on the number of workers.
pub fn train_patch_models(
    split: &CohortSplit,
    layout: &RegionLayout,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<PatchTraining> {
    if cfg.level != Level::Patch {
        return Err(LabError::invalid("train_patch_models needs level = patch"));
    }
    cfg.validate()?;
    let init = ModelParams::init(layout, encoder, cfg.seed)?;
    let out = try_map_indexed(layout.len(), mode, |l| {
        train_region(split, layout, l, encoder, cfg, init.patches[l].clone())
    })?;
    let (params, reports) = out.into_iter().unzip();
    Ok(PatchTraining { params, reports })
}

/// Trains the encoder of region `l` starting from `params`.
pub fn train_region(
    split: &CohortSplit,
    layout: &RegionLayout,
    l: usize,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    mut params: PatchEncoderParams,
) -> Result<(PatchEncoderParams, TrainReport)> {
    let started = Instant::now();
    let region = layout.region(l);
    let x_all = split
        .regions
        .get(l)
        .ok_or_else(|| LabError::invalid(format!("split lacks features for region {}", region.name)))?;
    let n = split.len();
    if x_all.rows() != n {
        return Err(LabError::invalid(format!(
            "region {} has {} rows for {n} subjects",
            region.name,
            x_all.rows()
        )));
    }
    let aux_cols = &region.aux_columns;
    let b = cfg.effective_batch(n, aux_cols.len(), encoder.embed_dim)?;
    let region_seed = ModelParams::patch_seed(cfg.seed, l);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(region_seed, 1));
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = Adam::new(cfg.learning_rate, cfg.adam.clone(), &shapes);
    let mut trace = Vec::with_capacity(cfg.steps);
    let context = format!("region {}", region.name);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = sample(&mut rng, n, b).into_vec();
        let mut views = DenseMatrix::zeros(2 * b, x_all.cols());
        for (k, &i) in batch.iter().enumerate() {
            for v in 0..2 {
                let row = views.row_mut(2 * k + v);
                row.copy_from_slice(x_all.row(i));
                augment_in_place(row, &mut rng, &cfg.augment);
            }
        }
        let aux = AuxBatch::duplicated(&split.aux.select_rows(&batch).select_cols(aux_cols));

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true)?;
        let x = tape.constant(views)?;
        let loss = at_step(
            (|| {
                let h = encode_patch_rows(&mut tape, &vars, x, region)?;
                method_loss(&mut tape, cfg, h, Some(&aux))
            })(),
            step,
            &context,
        )?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(LabError::Diverged { step, context });
        }
        trace.push(value);
        let grads = at_step(tape.backward(loss), step, &context)?;
        let g: Vec<&DenseMatrix> = vars.iter().map(|&id| grads.of(id)).collect();
        opt.step(params.tensors_mut(), &g)?;
    }

    let report = TrainReport {
        method: cfg.method,
        level: Level::Patch,
        region: Some(region.name.clone()),
        seed: region_seed,
        optimizer: optimizer_label(cfg),
        batch_size: b,
        steps: cfg.steps,
        loss_trace: trace,
        params_checksum: checksum_hex(params.checksum()),
        frozen_checksum: None,
        wall_time: started.elapsed(),
    };
    Ok((params, report))
}
