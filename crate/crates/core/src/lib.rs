//! Few-shot classification over frozen vision-language embeddings with two
//! identity-initialized residual adapters (a low-capacity "integrator" and a
//! higher-capacity "refiner"), fused with the zero-shot head and trained under
//! L1 logit-consistency and Jeffreys consensus regularizers.
//!
//! Module map:
//!
//! - [`embedding_store`]: the CMF1 matrix format, task manifests, K-shot sampling.
//! - [`geometry`]: softmax, KL/Jeffreys divergences, Fisher-Rao distance and the
//!   numerical checks built on them.
//! - [`experts`]: adapter heads, logit fusion and prediction.
//! - [`objectives`]: the loss terms and their hand-derived gradients.
//! - [`trainer`]: warmup + cosine SGD and evaluation.
//! - [`bench`]: synthetic tasks, ablation grid, shot sweeps, verification reports.

pub mod bench;
mod dd;
pub mod embedding_store;
pub mod error;
pub mod experts;
pub mod geometry;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use embedding_store::{EmbeddingMatrix, FrozenData, LabeledRow, ShotTask, Split, TaskManifest};
pub use error::{Error, Result};
pub use experts::{ExpertOutputs, ExpertParams};
pub use objectives::{CoMuCoConfig, LossBreakdown};
pub use trainer::{LrSchedule, TrainHistory};
