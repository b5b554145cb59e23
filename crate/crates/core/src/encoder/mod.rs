//! Patch encoders, the attention aggregator, augmentation and checkpoints.

mod aggregator;
pub(crate) mod augment;
mod checkpoint;
mod layout;
mod params;
mod patch;

pub use aggregator::{aggregate, aggregate_views, ViewItems};
pub use augment::{augment_rows, augment_vector, AugmentConfig};
pub use checkpoint::{AggregatorCheckpoint, PatchCheckpoint, CHECKPOINT_VERSION};
pub use layout::{Region, RegionLayout};
pub use params::{
    Affine, AggregatorParams, AttentionBlock, EncoderConfig, ModelParams, ParamSet,
    PatchEncoderParams,
};
pub use patch::{encode_patch, encode_patch_rows};
