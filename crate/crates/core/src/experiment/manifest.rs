use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, HeadSpec};
use crate::train::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";

/// Where the images of a run come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A class-per-subdirectory tree outside the run directory.
    Directory { root: PathBuf },
    /// Generated images exported to `root` (relative to the run directory).
    Synthetic {
        classes: usize,
        per_class: usize,
        side: usize,
        seed: u64,
        root: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRef {
    pub path: PathBuf,
    pub seed: u64,
    pub ratios: [f64; 3],
    /// Train, validation and test sizes.
    pub counts: [usize; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<u64>,
    /// Head initialisation, shuffling, dropout and random backbone weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explain: Option<u64>,
}

/// Artifact paths, all relative to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub split: Option<PathBuf>,
    pub initial_head: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub history_csv: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub confusion_png: Option<PathBuf>,
    pub confusion_csv: Option<PathBuf>,
    #[serde(default)]
    pub attributions: Vec<PathBuf>,
}

impl Artifacts {
    pub fn referenced(&self) -> Vec<&Path> {
        [
            &self.split,
            &self.initial_head,
            &self.checkpoint,
            &self.history,
            &self.history_csv,
            &self.metrics,
            &self.predictions,
            &self.confusion_png,
            &self.confusion_csv,
        ]
        .into_iter()
        .flatten()
        .chain(&self.attributions)
        .map(PathBuf::as_path)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
    pub dataset: DatasetSource,
    pub split: SplitRef,
    /// Square side images are resized to.
    pub image_side: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub seeds: Seeds,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<()> {
        self.updated = Utc::now();
        let path = Self::path(run_dir);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Root of the image tree, resolved against the run directory.
    pub fn dataset_root(&self, run_dir: &Path) -> PathBuf {
        match &self.dataset {
            DatasetSource::Directory { root } => run_dir.join(root),
            DatasetSource::Synthetic { root, .. } => run_dir.join(root),
        }
    }

    /// Referenced artifacts that do not exist under `run_dir`.
    pub fn missing_artifacts(&self, run_dir: &Path) -> Vec<PathBuf> {
        self.artifacts
            .referenced()
            .into_iter()
            .filter(|p| !run_dir.join(p).exists())
            .map(Path::to_path_buf)
            .collect()
    }

    pub fn check_artifacts(&self, run_dir: &Path) -> Result<()> {
        let missing = self.missing_artifacts(run_dir);
        if missing.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        Err(Error::Data(format!(
            "run {} references missing artifacts: {}",
            self.run_id,
            list.join(", ")
        )))
    }
}
