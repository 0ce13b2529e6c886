//! Precomputed embeddings: the CMF1 matrix container, task manifests, and
//! seeded K-shot episode sampling.

mod cmf;
mod manifest;
mod matrix;
mod sampling;

pub use cmf::{
    decode_feature_block, encode_feature_block, load_feature_file, save_feature_file,
    CMF1_HEADER_LEN, CMF1_MAGIC,
};
pub use manifest::{FrozenData, ManifestRow, Split, TaskManifest};
pub(crate) use matrix::l2_norm;
pub use matrix::EmbeddingMatrix;
pub use sampling::{sample_k_shot, LabeledRow, ShotTask};
