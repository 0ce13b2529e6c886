use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_feature_file, EmbeddingMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Row of the image feature file.
    pub index: usize,
    pub label: usize,
    pub split: Split,
}

/// JSON task description. Feature paths are resolved relative to the
/// manifest's own directory when relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub class_names: Vec<String>,
    pub image_features: PathBuf,
    pub text_embeddings: PathBuf,
    pub rows: Vec<ManifestRow>,
    /// Selects the long (300-epoch) default schedule.
    #[serde(default)]
    pub cross_domain: bool,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl TaskManifest {
    pub fn new(
        class_names: Vec<String>,
        image_features: impl Into<PathBuf>,
        text_embeddings: impl Into<PathBuf>,
        rows: Vec<ManifestRow>,
        cross_domain: bool,
    ) -> Result<Self> {
        let m = Self {
            class_names,
            image_features: image_features.into(),
            text_embeddings: text_embeddings.into(),
            rows,
            cross_domain,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = serde_json::from_str(text)?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_features_path(&self) -> PathBuf {
        self.base_dir.join(&self.image_features)
    }

    pub fn text_embeddings_path(&self) -> PathBuf {
        self.base_dir.join(&self.text_embeddings)
    }

    /// Structural checks that need no feature files.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Manifest("class_names is empty".into()));
        }
        let mut seen = HashSet::with_capacity(self.rows.len());
        let mut has_test = vec![false; c];
        for r in &self.rows {
            if r.label >= c {
                return Err(Error::Manifest(format!(
                    "row {} has label {} but there are {c} classes",
                    r.index, r.label
                )));
            }
            if !seen.insert(r.index) {
                return Err(Error::Manifest(format!(
                    "feature row {} is listed more than once",
                    r.index
                )));
            }
            if r.split == Split::Test {
                has_test[r.label] = true;
            }
        }
        if let Some(cls) = has_test.iter().position(|&t| !t) {
            return Err(Error::Manifest(format!(
                "class {:?} has no test rows",
                self.class_names[cls]
            )));
        }
        Ok(())
    }

    /// Train-split feature rows per class, in manifest order.
    pub fn train_rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for r in self.rows.iter().filter(|r| r.split == Split::Train) {
            by_class[r.label].push(r.index);
        }
        by_class
    }

    /// Loads and L2-normalizes both feature files and checks them against the
    /// manifest.
    pub fn load_frozen(&self) -> Result<FrozenData> {
        let features = load_feature_file(self.image_features_path())?;
        let text = load_feature_file(self.text_embeddings_path())?;
        FrozenData::new(self, features, text)
    }
}

/// Frozen, normalized image features and class text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenData {
    pub features: EmbeddingMatrix,
    pub text: EmbeddingMatrix,
}

impl FrozenData {
    pub fn new(
        manifest: &TaskManifest,
        features: EmbeddingMatrix,
        text: EmbeddingMatrix,
    ) -> Result<Self> {
        if text.rows() != manifest.num_classes() {
            return Err(Error::Manifest(format!(
                "{} classes but text embeddings have {} rows",
                manifest.num_classes(),
                text.rows()
            )));
        }
        if text.cols() != features.cols() {
            return Err(Error::Shape(format!(
                "image features have dimension {}, text embeddings {}",
                features.cols(),
                text.cols()
            )));
        }
        if let Some(r) = manifest.rows.iter().find(|r| r.index >= features.rows()) {
            return Err(Error::Manifest(format!(
                "row index {} out of range for {} feature rows",
                r.index,
                features.rows()
            )));
        }
        Ok(Self {
            features: features.l2_normalize()?,
            text: text.l2_normalize()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.text.rows()
    }
}
