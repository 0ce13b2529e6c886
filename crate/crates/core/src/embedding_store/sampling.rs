use super::manifest::Split;
use super::TaskManifest;
use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SHOT_SAMPLING};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledRow {
    pub row: usize,
    pub label: usize,
}

/// A resolved K-shot episode: exactly `k` train rows per class plus the full
/// test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotTask {
    pub k: usize,
    pub train_rows: Vec<LabeledRow>,
    pub test_rows: Vec<LabeledRow>,
    pub seed: u64,
}

/// Draws `k` distinct train rows per class. Classes are visited in label
/// order, each taking a partial Fisher-Yates draw from one ChaCha8 stream, so
/// the result is a pure function of `(manifest, k, seed)`.
pub fn sample_k_shot(manifest: &TaskManifest, k: usize, seed: u64) -> Result<ShotTask> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    let by_class = manifest.train_rows_by_class();
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() < k {
            return Err(Error::InsufficientShots {
                class: manifest.class_names[c].clone(),
                available: rows.len(),
                requested: k,
            });
        }
    }

    let mut rng = rng::stream_rng(seed, STREAM_SHOT_SAMPLING);
    let mut train_rows = Vec::with_capacity(k * by_class.len());
    for (label, mut pool) in by_class.into_iter().enumerate() {
        for i in 0..k {
            let j = rand::Rng::random_range(&mut rng, i as u32..pool.len() as u32) as usize;
            pool.swap(i, j);
            train_rows.push(LabeledRow {
                row: pool[i],
                label,
            });
        }
    }

    let test_rows = manifest
        .rows
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| LabeledRow {
            row: r.index,
            label: r.label,
        })
        .collect();

    Ok(ShotTask {
        k,
        train_rows,
        test_rows,
        seed,
    })
}
