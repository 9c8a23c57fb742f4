//! The fixed vocabulary of diagnostic descriptions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::CellClass;

pub const NORMAL_CELL: &str = "normal cell";
pub const ATYPICAL_GLANDULAR: &str = "atypical glandular cells";

const BUILTIN: &str = include_str!("../assets/vocabulary.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDescriptions {
    pub class: CellClass,
    pub descriptions: Vec<String>,
}

/// File form: class -> description strings, versioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyFile {
    pub vocabulary_version: u32,
    pub classes: Vec<ClassDescriptions>,
}

/// Unique description strings in first-appearance order, with the classes
/// each one is listed under.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionVocabulary {
    version: u32,
    entries: Vec<String>,
    classes_of: Vec<Vec<CellClass>>,
}

impl DescriptionVocabulary {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled vocabulary is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text).map_err(|e| Error::Format {
            path: "<vocabulary>".into(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn from_file(file: VocabularyFile) -> Result<Self> {
        let mut entries: Vec<String> = Vec::new();
        let mut classes_of: Vec<Vec<CellClass>> = Vec::new();
        for group in &file.classes {
            for d in &group.descriptions {
                let d = d.trim();
                if d.is_empty() {
                    return Err(Error::param("vocabulary", "empty description string"));
                }
                match entries.iter().position(|e| e == d) {
                    Some(i) => {
                        if !classes_of[i].contains(&group.class) {
                            classes_of[i].push(group.class);
                        }
                    }
                    None => {
                        entries.push(d.to_string());
                        classes_of.push(vec![group.class]);
                    }
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        if !entries.iter().any(|e| e == NORMAL_CELL) {
            return Err(Error::param("vocabulary", "missing the `normal cell` entry"));
        }
        Ok(Self {
            version: file.vocabulary_version,
            entries,
            classes_of,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn index_of(&self, description: &str) -> Option<usize> {
        self.entries.iter().position(|e| e == description)
    }

    pub fn classes_of(&self, index: usize) -> &[CellClass] {
        &self.classes_of[index]
    }

    /// Multi-hot vector for a set of description strings.
    pub fn multi_hot<'a>(&self, descriptions: impl IntoIterator<Item = &'a str>) -> Result<Vec<u8>> {
        let mut v = vec![0u8; self.len()];
        for d in descriptions {
            let i = self
                .index_of(d)
                .ok_or_else(|| Error::NotInVocabulary(d.to_string()))?;
            v[i] = 1;
        }
        Ok(v)
    }

    pub fn decode(&self, multi_hot: &[u8]) -> Vec<&str> {
        multi_hot
            .iter()
            .zip(&self.entries)
            .filter(|(&b, _)| b != 0)
            .map(|(_, e)| e.as_str())
            .collect()
    }

    pub fn to_file(&self) -> VocabularyFile {
        let classes = CellClass::ALL
            .iter()
            .map(|&c| ClassDescriptions {
                class: c,
                descriptions: self
                    .entries
                    .iter()
                    .zip(&self.classes_of)
                    .filter(|(_, cs)| cs.contains(&c))
                    .map(|(e, _)| e.clone())
                    .collect(),
            })
            .filter(|g| !g.descriptions.is_empty())
            .collect();
        VocabularyFile {
            vocabulary_version: self.version,
            classes,
        }
    }
}
