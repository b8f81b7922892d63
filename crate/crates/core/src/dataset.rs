//! Class labels, fragment views, and the dataset manifest.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse manifest {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest entry {0} has a duplicate image_id")]
    DuplicateImageId(String),
}

/// The four kidney-stone classes. Encoded 0..3 in this fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "COM")]
    Com,
    #[serde(rename = "COD")]
    Cod,
    #[serde(rename = "UA")]
    Ua,
    #[serde(rename = "BRU")]
    Bru,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [ClassLabel::Com, ClassLabel::Cod, ClassLabel::Ua, ClassLabel::Bru];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Com => 0,
            ClassLabel::Cod => 1,
            ClassLabel::Ua => 2,
            ClassLabel::Bru => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Com => "COM",
            ClassLabel::Cod => "COD",
            ClassLabel::Ua => "UA",
            ClassLabel::Bru => "BRU",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether an image shows a fragment's outer surface or its cut section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Surface,
    Section,
}

impl View {
    pub const ALL: [View; 2] = [View::Surface, View::Section];

    pub fn name(self) -> &'static str {
        match self {
            View::Surface => "surface",
            View::Section => "section",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One source image with its mask and annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub class: ClassLabel,
    pub view: View,
    pub image_id: String,
}

/// The dataset manifest: a JSON list of annotated image/mask pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, ManifestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|source| ManifestError::Parse { path: path.display().to_string(), source })?;
        let mut seen = std::collections::HashSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.image_id.clone()) {
                return Err(ManifestError::DuplicateImageId(e.image_id.clone()));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }
}
