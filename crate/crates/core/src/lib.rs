//! Core data model and learning pipeline for weakly supervised slide-level
//! cervical cytology screening.

pub mod align;
pub mod augment;
pub mod color;
pub mod coloradv;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod image;
pub mod manifest;
pub mod model;
pub mod swift;
pub mod synthgen;
pub mod taxonomy;
pub mod topk;
pub mod vocab;

pub use corpus::Corpus;
pub use error::{Error, Result};
pub use image::{CellImage, RgbImage};
pub use manifest::{Manifest, Split};
pub use synthgen::WsiBag;
pub use taxonomy::{CellClass, NUM_CLASSES};
pub use vocab::DescriptionVocabulary;
