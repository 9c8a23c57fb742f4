//! On-disk corpus: `manifest.json`, one PNG per cell, optional `oracle.json`
//! with the synthetic ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_png, save_png, CellImage};
use crate::manifest::{load_manifest, Manifest, Split, MANIFEST_FILE};
use crate::synthgen::WsiBag;
use crate::taxonomy::{merge_taxonomy, CellClass};

pub const ORACLE_FILE: &str = "oracle.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCell {
    pub latent_label: CellClass,
    pub latent_descriptions: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub wsi_id: String,
    pub cells: Vec<OracleCell>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    manifest: Manifest,
    bags: Vec<WsiBag>,
    oracle: Option<Vec<OracleRecord>>,
}

impl Corpus {
    pub(crate) fn new(manifest: Manifest, bags: Vec<WsiBag>, oracle: Option<Vec<OracleRecord>>) -> Self {
        Self { manifest, bags, oracle }
    }

    pub fn tile_path(wsi_id: &str, index: usize) -> String {
        format!("tiles/{wsi_id}/{index}.png")
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn bags(&self) -> &[WsiBag] {
        &self.bags
    }

    pub fn bags_mut(&mut self) -> &mut [WsiBag] {
        &mut self.bags
    }

    pub fn into_bags(self) -> Vec<WsiBag> {
        self.bags
    }

    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    pub fn split(&self, split: Split) -> Vec<&WsiBag> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }

    pub fn tile_size(&self) -> usize {
        self.manifest.tile_size
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (bag, record) in self.bags.iter().zip(&self.manifest.records) {
            for (cell, entry) in bag.instances.iter().zip(&record.cells) {
                save_png(&dir.join(&entry.path), cell.size, &cell.pixels)?;
            }
        }
        self.manifest.write(&dir.join(MANIFEST_FILE))?;
        if let Some(oracle) = &self.oracle {
            let path = dir.join(ORACLE_FILE);
            let text = serde_json::to_string(oracle).expect("oracle serializes");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads and validates a corpus directory. Latent fields are filled in when
    /// an oracle file is present.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let base = if dir.is_dir() { dir.to_path_buf() } else { dir.parent().unwrap_or(Path::new(".")).to_path_buf() };
        let oracle_path = base.join(ORACLE_FILE);
        let oracle: Option<Vec<OracleRecord>> = if oracle_path.exists() {
            let text = std::fs::read_to_string(&oracle_path).map_err(|e| Error::io(&oracle_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Format {
                path: oracle_path.clone(),
                message: e.to_string(),
            })?)
        } else {
            None
        };
        let mut bags = Vec::with_capacity(manifest.records.len());
        for (r, record) in manifest.records.iter().enumerate() {
            let latent = oracle.as_ref().and_then(|o| o.get(r)).filter(|o| o.wsi_id == record.wsi_id);
            let mut instances = Vec::with_capacity(record.cells.len());
            for (i, entry) in record.cells.iter().enumerate() {
                let (size, pixels) = load_png(&base.join(&entry.path))?;
                if size != manifest.tile_size {
                    return Err(Error::Shape(format!(
                        "{}: tile is {size}px, manifest says {}",
                        entry.path, manifest.tile_size
                    )));
                }
                let label = entry.label.as_deref().map(merge_taxonomy).transpose()?;
                let oc = latent.and_then(|o| o.cells.get(i));
                instances.push(CellImage {
                    size,
                    pixels,
                    label,
                    description_labels: entry.descriptions.clone(),
                    latent_label: oc.map(|c| c.latent_label),
                    latent_descriptions: oc.map(|c| c.latent_descriptions.clone()),
                    score: None,
                });
            }
            bags.push(WsiBag {
                id: record.wsi_id.clone(),
                instances,
                label: record.class(),
                domain: record.domain.clone(),
                split: record.split,
            });
        }
        Ok(Self { manifest, bags, oracle })
    }
}
