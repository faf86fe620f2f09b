//! Post-vector assembly and classification for every fusion strategy.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{FusionConfig, Mode};
pub use model::{
    forward, fuse, late_fuse, predict, ForwardCache, FusionTrace, Model, ModelInput, ModelParams,
    ModelWeights, PostVector, Provenance,
};
