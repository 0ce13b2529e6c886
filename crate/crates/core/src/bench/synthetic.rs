use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    save_feature_file, EmbeddingMatrix, FrozenData, ManifestRow, Split, TaskManifest,
};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_SYNTHETIC};

/// Largest allowed cosine between two class mean directions.
const MAX_MEAN_COSINE: f64 = 0.5;
const MAX_RESAMPLES: usize = 1000;
/// Tasks below this alignment are flagged `cross_domain`.
pub const CROSS_DOMAIN_ALIGNMENT: f64 = 0.5;

/// Gaussian class clusters on the sphere with text embeddings that agree with
/// the cluster directions to a tunable degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(alias = "C")]
    pub classes: usize,
    #[serde(alias = "d")]
    pub dim: usize,
    /// Rows per class in each split.
    pub n_train: usize,
    pub n_test: usize,
    /// 1: text embeddings equal the class means; 0: unrelated random directions.
    pub alignment: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 classes and 2 dimensions, got C={} d={}",
                self.classes, self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.alignment) {
            return Err(Error::Parameter(format!(
                "alignment must be in [0, 1], got {}",
                self.alignment
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Parameter(
                "need at least one train and one test row per class".into(),
            ));
        }
        Ok(())
    }
}

/// A generated task held in memory. Values are already rounded to `f32`, so
/// this is exactly what a reload of the written files yields.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub manifest: TaskManifest,
    pub features: EmbeddingMatrix,
    pub text: EmbeddingMatrix,
}

impl SyntheticTask {
    pub fn frozen(&self) -> Result<FrozenData> {
        FrozenData::new(&self.manifest, self.features.clone(), self.text.clone())
    }
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalized(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = crate::embedding_store::l2_norm(&v);
    (n > 0.0).then(|| v.into_iter().map(|x| x / n).collect())
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        if let Some(u) = normalized(gaussian(dim, rng)) {
            return u;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f32_grid(v: impl IntoIterator<Item = f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let (c, d) = (spec.classes, spec.dim);
    let mut rng = stream_rng(spec.seed, STREAM_SYNTHETIC);

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    for class in 0..c {
        let mut accepted = None;
        for _ in 0..MAX_RESAMPLES {
            let cand = random_unit(d, &mut rng);
            if means.iter().all(|m| dot(m, &cand) < MAX_MEAN_COSINE) {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(m) => means.push(m),
            None => {
                return Err(Error::Generation(format!(
                    "no direction for class {class} with cosine < {MAX_MEAN_COSINE} to the others \
                     after {MAX_RESAMPLES} draws (d={d} too small for C={c}?)"
                )))
            }
        }
    }

    let mut text = Vec::with_capacity(c * d);
    for (class, mean) in means.iter().enumerate() {
        let r = random_unit(d, &mut rng);
        let mix = mean
            .iter()
            .zip(&r)
            .map(|(m, x)| spec.alignment * m + (1.0 - spec.alignment) * x)
            .collect();
        let t = normalized(mix).ok_or_else(|| {
            Error::Generation(format!("text embedding for class {class} is degenerate"))
        })?;
        text.extend(to_f32_grid(t));
    }

    let per_class = spec.n_train + spec.n_test;
    let mut features = Vec::with_capacity(c * per_class * d);
    let mut rows = Vec::with_capacity(c * per_class);
    for (class, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let noisy = mean
                .iter()
                .zip(gaussian(d, &mut rng))
                .map(|(m, g)| m + spec.noise_sigma * g)
                .collect();
            let f = normalized(noisy).ok_or_else(|| {
                Error::Generation(format!("feature row for class {class} is degenerate"))
            })?;
            rows.push(ManifestRow {
                index: rows.len(),
                label: class,
                split: if i < spec.n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            });
            features.extend(to_f32_grid(f));
        }
    }

    let manifest = TaskManifest::new(
        (0..c).map(|k| format!("class_{k:03}")).collect(),
        "features.cmf",
        "text.cmf",
        rows,
        spec.alignment < CROSS_DOMAIN_ALIGNMENT,
    )?;
    Ok(SyntheticTask {
        manifest,
        features: EmbeddingMatrix::new(c * per_class, d, features)?,
        text: EmbeddingMatrix::new(c, d, text)?,
    })
}

/// Generates a task and writes `features.cmf`, `text.cmf` and
/// `manifest.json` into `out_dir`. Returns the manifest path.
pub fn make_synthetic_task(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<std::path::PathBuf> {
    let out_dir = out_dir.as_ref();
    let task = generate_synthetic(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_feature_file(out_dir.join(&task.manifest.image_features), &task.features)?;
    save_feature_file(out_dir.join(&task.manifest.text_embeddings), &task.text)?;
    let path = out_dir.join("manifest.json");
    task.manifest.save(&path)?;
    Ok(path)
}
