//! Two-stage self-supervised training: independent patch encoders per
//! region, then an attention aggregator over frozen patch embeddings.

mod adam;
mod aggregate;
mod config;
mod embed;
mod patch;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use aggregate::{train_aggregator, SubsetSplit};
pub use config::{AdamConfig, Level, Method, TrainConfig};
pub use embed::{embed_cohort, EmbeddingTable};
pub use patch::{train_patch_models, train_region, PatchTraining};

use crate::diffcore::{NodeId, Tape};
use crate::error::{LabError, Result};
use crate::losses::{barlow_twins_paired, nce_loss, rnce_loss, AuxBatch, RnceOptions, ViewBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub level: Level,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub seed: u64,
    pub optimizer: String,
    pub batch_size: usize,
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub params_checksum: String,
    /// Checksum of the frozen patch encoders, identical before and after.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_checksum: Option<String>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_trace.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// Means of the first and last `k` losses.
    pub fn window_means(&self, k: usize) -> Option<(f64, f64)> {
        let n = self.loss_trace.len();
        if k == 0 || n < k {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.loss_trace[..k]), mean(&self.loss_trace[n - k..])))
    }
}

pub(crate) fn optimizer_label(cfg: &TrainConfig) -> String {
    format!(
        "adam(lr={}, beta1={}, beta2={}, eps={})",
        cfg.learning_rate, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps
    )
}

pub(crate) fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

/// The configured loss on a stacked view batch.
pub(crate) fn method_loss(
    tape: &mut Tape,
    cfg: &TrainConfig,
    views: NodeId,
    aux: Option<&AuxBatch>,
) -> Result<NodeId> {
    match cfg.method {
        Method::Simclr => {
            let batch = ViewBatch::new(tape, views, cfg.temperature)?;
            nce_loss(tape, &batch)
        }
        Method::Barlow => barlow_twins_paired(tape, views, cfg.lambda),
        Method::Rnce => {
            let batch = ViewBatch::new(tape, views, cfg.temperature)?;
            let aux = aux.ok_or_else(|| LabError::invalid("rnce needs auxiliary features"))?;
            let opts = RnceOptions {
                ridge: cfg.ridge,
                aux_weight: cfg.aux_weight,
                normalize: cfg.normalize_aux,
                center: true,
            };
            rnce_loss(tape, &batch, aux, &opts)
        }
    }
}

/// Non-finite values surface as a divergence at `step`.
pub(crate) fn at_step<T>(r: Result<T>, step: usize, context: &str) -> Result<T> {
    r.map_err(|e| match e {
        LabError::NonFinite(what) => LabError::Diverged {
            step,
            context: format!("{context}: {what}"),
        },
        other => other,
    })
}
