//! Corpus manifest: the JSON index of slides, splits and cell tiles.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{merge_taxonomy, CellClass, TAXONOMY_VERSION};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
    ShiftedTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::ShiftedTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::ShiftedTest => "shifted-test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, val, test or shifted-test)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellEntry {
    /// Tile path relative to the manifest directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsiRecord {
    pub wsi_id: String,
    pub label: String,
    pub domain: String,
    pub split: Split,
    pub cells: Vec<CellEntry>,
}

impl WsiRecord {
    /// Slide class; only meaningful on a validated manifest.
    pub fn class(&self) -> CellClass {
        merge_taxonomy(&self.label).expect("validated manifest")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub taxonomy_version: String,
    pub vocabulary_version: u32,
    pub tile_size: usize,
    pub records: Vec<WsiRecord>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    Missing(PathBuf),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("unsupported manifest_version {0} (expected {MANIFEST_VERSION})")]
    UnsupportedVersion(u32),
    #[error("record `{wsi_id}`: unknown label `{label}`")]
    UnknownLabel { wsi_id: String, label: String },
    #[error("record `{wsi_id}`: cell tile `{path}` does not exist")]
    DanglingCell { wsi_id: String, path: String },
    #[error("wsi_id `{wsi_id}` appears in both {first} and {second} splits")]
    SplitOverlap {
        wsi_id: String,
        first: Split,
        second: Split,
    },
    #[error("wsi_id `{0}` appears twice in the same split")]
    DuplicateRecord(String),
    #[error("record `{0}` has no cells")]
    EmptyRecord(String),
    #[error("record `{wsi_id}` cell {cell}: description vector has {len} entries, vocabulary has {expected}")]
    DescriptionLength {
        wsi_id: String,
        cell: usize,
        len: usize,
        expected: usize,
    },
}

/// Summary numbers gathered while validating.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub records_per_split: Vec<(Split, usize)>,
    pub cells: usize,
    pub train_labelled_positive: usize,
    pub train_labelled_negative: usize,
    /// Cells on positive training slides, the denominator for the
    /// annotation fraction below.
    pub train_positive_slide_cells: usize,
    pub train_labelled_positive_fraction: f64,
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<ManifestError>,
    pub stats: ManifestStats,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reads and parses a manifest without checking its invariants.
pub fn read_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ManifestError::Missing(path.to_path_buf())
        } else {
            ManifestError::Read {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| ManifestError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads, parses and validates; the first violation becomes the error.
///
/// `path` may point at the manifest file or at the corpus directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest = read_manifest(&file)?;
    let base = file.parent().unwrap_or(Path::new("."));
    let mut report = validate_manifest(&manifest, Some(base), None);
    match report.violations.is_empty() {
        true => Ok(manifest),
        false => Err(report.violations.swap_remove(0)),
    }
}

/// Checks every manifest invariant and collects all violations.
///
/// Cell files are checked only when `base_dir` is given; description vector
/// lengths only when the vocabulary size is given.
pub fn validate_manifest(
    manifest: &Manifest,
    base_dir: Option<&Path>,
    vocabulary_len: Option<usize>,
) -> ValidationReport {
    let mut violations = Vec::new();
    if manifest.manifest_version != MANIFEST_VERSION {
        violations.push(ManifestError::UnsupportedVersion(manifest.manifest_version));
    }
    let mut seen: HashMap<&str, Split> = HashMap::new();
    let mut stats = ManifestStats::default();
    let mut per_split: HashMap<Split, usize> = HashMap::new();

    for rec in &manifest.records {
        *per_split.entry(rec.split).or_default() += 1;
        match seen.get(rec.wsi_id.as_str()) {
            Some(&first) if first != rec.split => violations.push(ManifestError::SplitOverlap {
                wsi_id: rec.wsi_id.clone(),
                first,
                second: rec.split,
            }),
            Some(_) => violations.push(ManifestError::DuplicateRecord(rec.wsi_id.clone())),
            None => {
                seen.insert(&rec.wsi_id, rec.split);
            }
        }
        let slide_class = merge_taxonomy(&rec.label);
        if slide_class.is_err() {
            violations.push(ManifestError::UnknownLabel {
                wsi_id: rec.wsi_id.clone(),
                label: rec.label.clone(),
            });
        }
        if rec.cells.is_empty() {
            violations.push(ManifestError::EmptyRecord(rec.wsi_id.clone()));
        }
        let positive_slide = matches!(slide_class, Ok(c) if c.is_positive());
        if rec.split == Split::Train && positive_slide {
            stats.train_positive_slide_cells += rec.cells.len();
        }
        for (i, cell) in rec.cells.iter().enumerate() {
            stats.cells += 1;
            if let Some(label) = &cell.label {
                match merge_taxonomy(label) {
                    Ok(c) if rec.split == Split::Train => {
                        if c.is_positive() {
                            stats.train_labelled_positive += 1;
                        } else {
                            stats.train_labelled_negative += 1;
                        }
                    }
                    Ok(_) => {}
                    Err(_) => violations.push(ManifestError::UnknownLabel {
                        wsi_id: rec.wsi_id.clone(),
                        label: label.clone(),
                    }),
                }
            }
            if let (Some(d), Some(n)) = (&cell.descriptions, vocabulary_len) {
                if d.len() != n {
                    violations.push(ManifestError::DescriptionLength {
                        wsi_id: rec.wsi_id.clone(),
                        cell: i,
                        len: d.len(),
                        expected: n,
                    });
                }
            }
            if let Some(base) = base_dir {
                if !base.join(&cell.path).is_file() {
                    violations.push(ManifestError::DanglingCell {
                        wsi_id: rec.wsi_id.clone(),
                        path: cell.path.clone(),
                    });
                }
            }
        }
    }
    stats.records_per_split = Split::ALL
        .iter()
        .map(|s| (*s, per_split.get(s).copied().unwrap_or(0)))
        .collect();
    stats.train_labelled_positive_fraction = if stats.train_positive_slide_cells > 0 {
        stats.train_labelled_positive as f64 / stats.train_positive_slide_cells as f64
    } else {
        0.0
    };
    ValidationReport { violations, stats }
}

impl Manifest {
    pub fn new(tile_size: usize, vocabulary_version: u32) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            taxonomy_version: TAXONOMY_VERSION.to_string(),
            vocabulary_version,
            tile_size,
            records: Vec::new(),
        }
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &WsiRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, path: &Path) -> crate::error::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| crate::error::Error::io(path, e))
    }
}
