//! Posts, dataset files, the reliability-ranked split, and the synthetic generator.

mod posts;
mod split;
pub mod synth;

pub use posts::{
    load_manifest, load_posts, load_posts_with, write_posts, Dataset, ImageSource, Manifest, Post,
};
pub use split::{make_splits, DatasetSplit};
pub use synth::{gen_synthetic, SynthConfig, SyntheticDataset};
