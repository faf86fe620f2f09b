//! Turning raw modalities into vectors: word-embedding aggregation for text,
//! precomputed CNN features plus a learned projection for images.

mod image;
mod text;
mod vocab;

pub use image::{
    init_projection, project_image, FeatureStore, ImageFeature, ProjectionParams,
    DEFAULT_IMAGE_DIM, FEATURE_MAGIC,
};
pub use text::{encode_ids, encode_text, Dropout, Reduce, TextEncoding};
pub use vocab::{
    build_vocabulary, load_embeddings, EmbeddingTable, Tokenizer, Vocabulary, WhitespaceTokenizer,
    UNSEEDED_ROW_BOUND,
};
