//! Run configuration: one TOML tree covering every stage, with defaults
//! filled in per section and `--set key=value` overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stride_core::align::AlignConfig;
use stride_core::coloradv::ColorAdvConfig;
use stride_core::eval::EvalConfig;
use stride_core::model::ModelConfig;
use stride_core::swift::{HeadConfig, PretrainConfig, SwiftConfig};
use stride_core::synthgen::CorpusConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Keep logs free of wall-clock fields so identical runs produce identical bytes.
    pub deterministic: bool,
    /// Output root; `STRIDE_OUT` and `--out` take precedence.
    pub output_dir: Option<PathBuf>,
    /// Tile side in pixels, shared by the generator and the encoder.
    pub tile_size: usize,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub frozen_head: HeadConfig,
    pub swift: SwiftConfig,
    pub coloradv: ColorAdvConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            deterministic: true,
            output_dir: None,
            tile_size: model.tile_size,
            corpus: CorpusConfig::default(),
            model,
            pretrain: PretrainConfig::default(),
            frozen_head: HeadConfig::default(),
            swift: SwiftConfig::default(),
            coloradv: ColorAdvConfig::default(),
            align: AlignConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::user(format!("--set {key}: `{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(CliError::user(format!("--set: empty key in `{key}`")))
}

fn has_path(root: &toml::Value, key: &str) -> bool {
    let mut node = root;
    for part in key.split('.') {
        match node.get(part) {
            Some(v) => node = v,
            None => return false,
        }
    }
    true
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn parse_override(s: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::user(format!("--set expects key=value, got `{s}`")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Builds the resolved config from optional TOML text plus overrides.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree: toml::Value = match text {
            Some(t) => toml::from_str(t).map_err(|e| CliError::user(format!("config: {e}")))?,
            None => toml::Value::Table(Default::default()),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut tree, &k, v)?;
        }
        // The shared tile size flows into both sections unless they name their own.
        let top = has_path(&tree, "tile_size");
        let explicit_corpus = has_path(&tree, "corpus.render.tile_size");
        let explicit_model = has_path(&tree, "model.tile_size");
        let explicit_corpus_seed = has_path(&tree, "corpus.seed");
        let mut cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| CliError::user(format!("config: {e}")))?;
        if !top {
            if explicit_model {
                cfg.tile_size = cfg.model.tile_size;
            } else if explicit_corpus {
                cfg.tile_size = cfg.corpus.render.tile_size;
            }
        }
        if !explicit_corpus {
            cfg.corpus.render.tile_size = cfg.tile_size;
        }
        if !explicit_model {
            cfg.model.tile_size = cfg.tile_size;
        }
        if !explicit_corpus_seed {
            cfg.corpus.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
                Self::from_sources(Some(&text), overrides)
            }
            None => Self::from_sources(None, overrides),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.corpus.render.tile_size != self.tile_size || self.model.tile_size != self.tile_size {
            return Err(CliError::user(format!(
                "tile sizes disagree: tile_size={}, corpus.render.tile_size={}, model.tile_size={}",
                self.tile_size, self.corpus.render.tile_size, self.model.tile_size
            )));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.swift.validate()?;
        self.coloradv.validate()?;
        self.align.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
