//! Procedural cytology corpus.
//!
//! Cells are composites of soft-edged ellipses (cytoplasm, optional halo ring,
//! nucleus) whose geometry encodes the diagnostic descriptors of each class.
//! Slides follow the max-pooling label rule by construction, only a budgeted
//! fraction of positive training cells carry a visible label, and the
//! shifted-test split is rendered with stain domains never seen in training.

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::hsv_to_rgb;
use crate::corpus::{Corpus, OracleCell, OracleRecord};
use crate::error::{Error, Result};
use crate::image::{CellImage, RgbImage};
use crate::manifest::{CellEntry, Manifest, Split, WsiRecord};
use crate::taxonomy::{CellClass, Severity, NUM_CLASSES};
use crate::vocab::{DescriptionVocabulary, ATYPICAL_GLANDULAR, NORMAL_CELL};

/// Morphological attributes a rendered cell can show. Each maps to one
/// vocabulary description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Normal,
    Enlargement2p5To3,
    EnlargementOver3,
    IrregularContour,
    MildHyperchromasia,
    Hyperchromasia,
    PerinuclearHalo,
    Binucleation,
    HighNcRatio,
    GlandularCluster,
}

impl Attribute {
    pub fn description(self) -> &'static str {
        match self {
            Attribute::Normal => NORMAL_CELL,
            Attribute::Enlargement2p5To3 => "nuclear enlargement to 2.5-3 times",
            Attribute::EnlargementOver3 => "nuclear enlargement of more than 3 times",
            Attribute::IrregularContour => "irregular nuclear membrane or contour",
            Attribute::MildHyperchromasia => {
                "mild hyperchromasia, mildly darker than normal staining pattern in the nucleus"
            }
            Attribute::Hyperchromasia => {
                "hyperchromasia, darker than normal staining pattern in the nucleus."
            }
            Attribute::PerinuclearHalo => "perinuclear halo or cytoplasmic vacuolization",
            Attribute::Binucleation => "binucleation or multinucleation cell",
            Attribute::HighNcRatio => "high nuclear-cytoplasmic ratio",
            Attribute::GlandularCluster => ATYPICAL_GLANDULAR,
        }
    }
}

/// Multi-hot description labels for a rendered cell.
///
/// NILM always maps to `normal cell` alone and AGC to the single consolidated
/// glandular descriptor; other classes map each attribute to its description.
pub fn assign_descriptions(
    class: CellClass,
    attributes: &[Attribute],
    vocab: &DescriptionVocabulary,
) -> Result<Vec<u8>> {
    match class {
        CellClass::Nilm => vocab.multi_hot([NORMAL_CELL]),
        CellClass::Agc => vocab.multi_hot([ATYPICAL_GLANDULAR]),
        _ => vocab.multi_hot(attributes.iter().map(|a| a.description())),
    }
}

/// Stain appearance of one acquisition domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainDomain {
    pub name: String,
    /// Added to every hue, in turns.
    pub hue_shift: f64,
    pub saturation_scale: f64,
    pub brightness_offset: f64,
    pub noise_sigma: f64,
    /// Per-slide standard deviation around the domain's hue/brightness.
    pub slide_jitter: f64,
}

impl StainDomain {
    pub fn sample_slide<R: Rng + ?Sized>(&self, rng: &mut R) -> Stain {
        let n = Normal::new(0.0, self.slide_jitter.max(0.0)).expect("finite jitter");
        Stain {
            hue_shift: self.hue_shift + n.sample(rng),
            saturation_scale: self.saturation_scale * (1.0 + n.sample(rng)),
            brightness_offset: self.brightness_offset + n.sample(rng),
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn nominal(&self) -> Stain {
        Stain {
            hue_shift: self.hue_shift,
            saturation_scale: self.saturation_scale,
            brightness_offset: self.brightness_offset,
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Concrete stain parameters of one slide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stain {
    pub hue_shift: f64,
    pub saturation_scale: f64,
    pub brightness_offset: f64,
    pub noise_sigma: f64,
}

impl Stain {
    pub fn neutral() -> Self {
        Self {
            hue_shift: 0.0,
            saturation_scale: 1.0,
            brightness_offset: 0.0,
            noise_sigma: 0.0,
        }
    }

    fn apply(&self, [h, s, v]: [f64; 3]) -> [f64; 3] {
        hsv_to_rgb([
            (h + self.hue_shift).rem_euclid(1.0),
            (s * self.saturation_scale).clamp(0.0, 1.0),
            (v + self.brightness_offset).clamp(0.0, 1.0),
        ])
    }
}

/// Range `[lo, hi]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        if self.1 <= self.0 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    pub fn contains(self, x: f64) -> bool {
        x >= self.0 && x <= self.1
    }
}

/// Geometry knobs of one cell class. Radii are fractions of the tile size,
/// nucleus sizes are multiples of the reference (normal) nucleus radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMorphology {
    pub nucleus_ratio: Span,
    pub cytoplasm_radius: Span,
    pub halo_prob: f64,
    pub binucleation_prob: f64,
    pub irregular_prob: f64,
    pub hyperchromasia_prob: f64,
    /// Cells per glandular cluster; `None` for single cells.
    pub cluster: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSpec {
    pub tile_size: usize,
    /// Radius of a normal nucleus as a fraction of the tile size.
    pub reference_nucleus: f64,
    /// Nucleus/cytoplasm radius ratio above which a cell counts as high N:C.
    pub high_nc_ratio: f64,
    /// Indexed by class id.
    pub morphology: Vec<ClassMorphology>,
    /// Share of NILM cells drawn as hard negatives (parabasal-like cells,
    /// inflammatory clusters, overlapping pairs).
    pub nilm_hard_fraction: f64,
    pub domains: Vec<StainDomain>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            tile_size: 64,
            reference_nucleus: 0.05,
            high_nc_ratio: 0.55,
            morphology: vec![
                // NILM
                ClassMorphology {
                    nucleus_ratio: Span(0.8, 1.3),
                    cytoplasm_radius: Span(0.30, 0.42),
                    halo_prob: 0.0,
                    binucleation_prob: 0.0,
                    irregular_prob: 0.0,
                    hyperchromasia_prob: 0.0,
                    cluster: None,
                },
                // ASC-US
                ClassMorphology {
                    nucleus_ratio: Span(2.5, 3.0),
                    cytoplasm_radius: Span(0.32, 0.40),
                    halo_prob: 0.0,
                    binucleation_prob: 0.0,
                    irregular_prob: 0.5,
                    hyperchromasia_prob: 0.5,
                    cluster: None,
                },
                // LSIL
                ClassMorphology {
                    nucleus_ratio: Span(3.2, 3.8),
                    cytoplasm_radius: Span(0.34, 0.42),
                    halo_prob: 0.6,
                    binucleation_prob: 0.3,
                    irregular_prob: 0.4,
                    hyperchromasia_prob: 0.0,
                    cluster: None,
                },
                // ASC-H/HSIL
                ClassMorphology {
                    nucleus_ratio: Span(2.6, 3.2),
                    cytoplasm_radius: Span(0.17, 0.22),
                    halo_prob: 0.0,
                    binucleation_prob: 0.0,
                    irregular_prob: 0.5,
                    hyperchromasia_prob: 0.6,
                    cluster: None,
                },
                // AGC
                ClassMorphology {
                    nucleus_ratio: Span(1.3, 1.6),
                    cytoplasm_radius: Span(0.10, 0.13),
                    halo_prob: 0.0,
                    binucleation_prob: 0.0,
                    irregular_prob: 0.0,
                    hyperchromasia_prob: 1.0,
                    cluster: Some((3, 5)),
                },
            ],
            nilm_hard_fraction: 0.6,
            domains: default_domains(),
        }
    }
}

pub fn default_domains() -> Vec<StainDomain> {
    vec![
        StainDomain {
            name: "A".into(),
            hue_shift: 0.0,
            saturation_scale: 1.0,
            brightness_offset: 0.0,
            noise_sigma: 0.015,
            slide_jitter: 0.01,
        },
        StainDomain {
            name: "B".into(),
            hue_shift: 0.03,
            saturation_scale: 1.1,
            brightness_offset: -0.03,
            noise_sigma: 0.02,
            slide_jitter: 0.01,
        },
        StainDomain {
            name: "C".into(),
            hue_shift: -0.15,
            saturation_scale: 0.5,
            brightness_offset: -0.2,
            noise_sigma: 0.02,
            slide_jitter: 0.01,
        },
    ]
}

impl RenderSpec {
    pub fn domain(&self, name: &str) -> Result<&StainDomain> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::param("domain", format!("`{name}` is not defined")))
    }

    fn morphology(&self, class: CellClass) -> &ClassMorphology {
        &self.morphology[class.id()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 8 {
            return Err(Error::param("tile_size", "must be at least 8"));
        }
        if self.morphology.len() != NUM_CLASSES {
            return Err(Error::param("morphology", "needs one entry per class"));
        }
        let asc_us = &self.morphology[CellClass::AscUs.id()].nucleus_ratio;
        if asc_us.0 < 2.5 || asc_us.1 > 3.0 {
            return Err(Error::param("morphology", "ASC-US enlargement must lie in [2.5, 3]"));
        }
        if self.morphology[CellClass::Lsil.id()].nucleus_ratio.0 <= 3.0 {
            return Err(Error::param("morphology", "LSIL enlargement must exceed 3"));
        }
        let hsil = &self.morphology[CellClass::AscHHsil.id()];
        let min_nc = hsil.nucleus_ratio.0 * self.reference_nucleus / hsil.cytoplasm_radius.1;
        if min_nc <= self.high_nc_ratio {
            return Err(Error::param(
                "morphology",
                "ASC-H/HSIL nucleus/cytoplasm ratio must stay above high_nc_ratio",
            ));
        }
        if self.morphology[CellClass::Agc.id()].cluster.is_none() {
            return Err(Error::param("morphology", "AGC must render as clusters"));
        }
        Ok(())
    }
}

/// Measured geometry of a rendered cell, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub nucleus_radius: f64,
    pub reference_radius: f64,
    pub cytoplasm_radius: f64,
    pub nuclei: usize,
    pub halo: bool,
}

impl CellGeometry {
    pub fn enlargement(&self) -> f64 {
        self.nucleus_radius / self.reference_radius
    }

    pub fn nc_ratio(&self) -> f64 {
        self.nucleus_radius / self.cytoplasm_radius
    }
}

#[derive(Clone, Debug)]
pub struct RenderedCell {
    pub image: CellImage,
    pub attributes: Vec<Attribute>,
    pub geometry: CellGeometry,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    ecc: f64,
    angle: f64,
    wobble: f64,
    freq: f64,
    phase: f64,
}

impl Blob {
    fn round(cx: f64, cy: f64, r: f64) -> Self {
        Self {
            cx,
            cy,
            r,
            ecc: 0.0,
            angle: 0.0,
            wobble: 0.0,
            freq: 0.0,
            phase: 0.0,
        }
    }

    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / (self.r * (1.0 + self.ecc));
        let v = (-s * dx + c * dy) / (self.r * (1.0 - self.ecc));
        let rho = (u * u + v * v).sqrt();
        let edge = if self.wobble > 0.0 {
            1.0 + self.wobble * (self.freq * v.atan2(u) + self.phase).sin()
        } else {
            1.0
        };
        let signed_px = (rho - edge) * self.r;
        (0.5 - signed_px).clamp(0.0, 1.0)
    }
}

struct Layer {
    blob: Blob,
    hsv: [f64; 3],
}

const BACKGROUND: [f64; 3] = [0.92, 0.06, 0.94];
const HALO: [f64; 3] = [0.92, 0.03, 0.97];
const NUCLEUS: [f64; 3] = [0.72, 0.55, 0.45];

fn jitter_hsv<R: Rng + ?Sized>(rng: &mut R, [h, s, v]: [f64; 3]) -> [f64; 3] {
    [
        (h + rng.random_range(-0.01..0.01)).rem_euclid(1.0),
        (s + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0),
        (v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0),
    ]
}

fn cytoplasm_hsv<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    // eosinophilic (pink) or cyanophilic (blue-green) squamous cytoplasm
    let base = if rng.random_bool(0.5) {
        [0.95, 0.28, 0.86]
    } else {
        [0.52, 0.30, 0.84]
    };
    jitter_hsv(rng, base)
}

fn darker(hsv: [f64; 3], dv: f64, ds: f64) -> [f64; 3] {
    [hsv[0], (hsv[1] + ds).clamp(0.0, 1.0), (hsv[2] - dv).clamp(0.0, 1.0)]
}

fn rasterize(size: usize, layers: &[Layer], stain: &Stain, rng: &mut ChaCha8Rng) -> RgbImage {
    let bg = stain.apply(jitter_hsv(rng, BACKGROUND));
    let colors: Vec<[f64; 3]> = layers.iter().map(|l| stain.apply(l.hsv)).collect();
    let noise = Normal::new(0.0, stain.noise_sigma.max(0.0)).expect("finite sigma");
    let mut img = RgbImage::filled(size, bg);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = bg;
            for (layer, col) in layers.iter().zip(&colors) {
                let a = layer.blob.coverage(px, py);
                if a > 0.0 {
                    for c in 0..3 {
                        rgb[c] += a * (col[c] - rgb[c]);
                    }
                }
            }
            for v in rgb.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
            img.set(y, x, rgb);
        }
    }
    img
}

fn nilm_layers(
    spec: &RenderSpec,
    rng: &mut ChaCha8Rng,
    layers: &mut Vec<Layer>,
) -> CellGeometry {
    let t = spec.tile_size as f64;
    let r0 = spec.reference_nucleus * t;
    let m = spec.morphology(CellClass::Nilm);
    let c = t / 2.0;
    let hard = rng.random_bool(spec.nilm_hard_fraction.clamp(0.0, 1.0));
    let variant = if hard { rng.random_range(0..3) } else { 3 };
    match variant {
        0 => {
            // parabasal-like: rounder, smaller cytoplasm, slightly larger nucleus
            let cr = rng.random_range(0.24..0.30) * t;
            let nr = r0 * rng.random_range(1.4..1.9);
            let (cx, cy) = (c + rng.random_range(-0.04..0.04) * t, c + rng.random_range(-0.04..0.04) * t);
            layers.push(Layer { blob: Blob::round(cx, cy, cr), hsv: cytoplasm_hsv(rng) });
            layers.push(Layer { blob: Blob::round(cx, cy, nr), hsv: jitter_hsv(rng, NUCLEUS) });
            CellGeometry { nucleus_radius: nr, reference_radius: r0, cytoplasm_radius: cr, nuclei: 1, halo: false }
        }
        1 => {
            // inflammatory cells: scattered small dark nuclei, no cytoplasm
            let n = rng.random_range(4..=8);
            let mut nr_sum = 0.0;
            for _ in 0..n {
                let nr = r0 * rng.random_range(0.7..1.0);
                nr_sum += nr;
                let a = rng.random_range(0.0..TAU);
                let d = rng.random_range(0.0..0.3) * t;
                let blob = Blob::round(c + d * a.cos(), c + d * a.sin(), nr);
                layers.push(Layer { blob, hsv: darker(jitter_hsv(rng, NUCLEUS), 0.12, 0.1) });
            }
            CellGeometry { nucleus_radius: nr_sum / n as f64, reference_radius: r0, cytoplasm_radius: nr_sum / n as f64, nuclei: n, halo: false }
        }
        2 => {
            // two overlapping squamous cells
            let mut last = None;
            for k in 0..2 {
                let cr = m.cytoplasm_radius.sample(rng) * t * 0.8;
                let off = if k == 0 { -0.13 } else { 0.13 } * t;
                let a = rng.random_range(0.0..TAU);
                let (cx, cy) = (c + off * a.cos(), c + off * a.sin());
                let cyto = Blob { ecc: rng.random_range(0.0..0.15), angle: rng.random_range(0.0..TAU), wobble: 0.06, freq: 5.0, phase: rng.random_range(0.0..TAU), ..Blob::round(cx, cy, cr) };
                layers.push(Layer { blob: cyto, hsv: cytoplasm_hsv(rng) });
                let nr = r0 * m.nucleus_ratio.sample(rng);
                layers.push(Layer { blob: Blob::round(cx, cy, nr), hsv: jitter_hsv(rng, NUCLEUS) });
                last = Some((nr, cr));
            }
            let (nr, cr) = last.unwrap();
            CellGeometry { nucleus_radius: nr, reference_radius: r0, cytoplasm_radius: cr, nuclei: 2, halo: false }
        }
        _ => {
            let cr = m.cytoplasm_radius.sample(rng) * t;
            let (cx, cy) = (c + rng.random_range(-0.05..0.05) * t, c + rng.random_range(-0.05..0.05) * t);
            let cyto = Blob { ecc: rng.random_range(0.0..0.2), angle: rng.random_range(0.0..TAU), wobble: 0.07, freq: 5.0, phase: rng.random_range(0.0..TAU), ..Blob::round(cx, cy, cr) };
            layers.push(Layer { blob: cyto, hsv: cytoplasm_hsv(rng) });
            let nr = r0 * m.nucleus_ratio.sample(rng);
            // superficial cells carry small pyknotic (dark) nuclei
            let nuc = if nr < r0 { darker(jitter_hsv(rng, NUCLEUS), 0.1, 0.05) } else { jitter_hsv(rng, NUCLEUS) };
            layers.push(Layer { blob: Blob::round(cx, cy, nr), hsv: nuc });
            CellGeometry { nucleus_radius: nr, reference_radius: r0, cytoplasm_radius: cr, nuclei: 1, halo: false }
        }
    }
}

fn squamous_lesion_layers(
    class: CellClass,
    spec: &RenderSpec,
    rng: &mut ChaCha8Rng,
    layers: &mut Vec<Layer>,
    attrs: &mut Vec<Attribute>,
) -> CellGeometry {
    let t = spec.tile_size as f64;
    let r0 = spec.reference_nucleus * t;
    let m = spec.morphology(class);
    let c = t / 2.0;
    let (cx, cy) = (c + rng.random_range(-0.04..0.04) * t, c + rng.random_range(-0.04..0.04) * t);
    let cr = m.cytoplasm_radius.sample(rng) * t;
    let nr = r0 * m.nucleus_ratio.sample(rng);
    let cyto = Blob {
        ecc: rng.random_range(0.0..0.15),
        angle: rng.random_range(0.0..TAU),
        wobble: 0.05,
        freq: 4.0,
        phase: rng.random_range(0.0..TAU),
        ..Blob::round(cx, cy, cr)
    };
    layers.push(Layer { blob: cyto, hsv: cytoplasm_hsv(rng) });

    match class {
        CellClass::AscUs => attrs.push(Attribute::Enlargement2p5To3),
        CellClass::Lsil => attrs.push(Attribute::EnlargementOver3),
        CellClass::AscHHsil => attrs.push(Attribute::HighNcRatio),
        _ => unreachable!("squamous lesion classes only"),
    }

    let halo = rng.random_bool(m.halo_prob);
    if halo {
        layers.push(Layer { blob: Blob::round(cx, cy, (nr * 1.6).min(cr * 0.95)), hsv: HALO });
        attrs.push(Attribute::PerinuclearHalo);
    }
    let irregular = rng.random_bool(m.irregular_prob);
    if irregular {
        attrs.push(Attribute::IrregularContour);
    }
    let mut nucleus = jitter_hsv(rng, NUCLEUS);
    if rng.random_bool(m.hyperchromasia_prob) {
        if class == CellClass::AscUs {
            nucleus = darker(nucleus, 0.12, 0.05);
            attrs.push(Attribute::MildHyperchromasia);
        } else {
            nucleus = darker(nucleus, 0.22, 0.12);
            attrs.push(Attribute::Hyperchromasia);
        }
    }
    let binucleate = rng.random_bool(m.binucleation_prob);
    let centers: Vec<(f64, f64)> = if binucleate {
        attrs.push(Attribute::Binucleation);
        let a = rng.random_range(0.0..TAU);
        let d = 0.7 * nr;
        vec![(cx + d * a.cos(), cy + d * a.sin()), (cx - d * a.cos(), cy - d * a.sin())]
    } else {
        vec![(cx, cy)]
    };
    for &(x, y) in &centers {
        let blob = Blob {
            ecc: rng.random_range(0.0..0.12),
            angle: rng.random_range(0.0..TAU),
            wobble: if irregular { rng.random_range(0.12..0.2) } else { 0.0 },
            freq: if irregular { rng.random_range(5..=7) as f64 } else { 0.0 },
            phase: rng.random_range(0.0..TAU),
            ..Blob::round(x, y, nr)
        };
        layers.push(Layer { blob, hsv: nucleus });
    }
    CellGeometry { nucleus_radius: nr, reference_radius: r0, cytoplasm_radius: cr, nuclei: centers.len(), halo }
}

fn glandular_layers(
    spec: &RenderSpec,
    rng: &mut ChaCha8Rng,
    layers: &mut Vec<Layer>,
    attrs: &mut Vec<Attribute>,
) -> CellGeometry {
    let t = spec.tile_size as f64;
    let r0 = spec.reference_nucleus * t;
    let m = spec.morphology(CellClass::Agc);
    let (lo, hi) = m.cluster.unwrap_or((3, 5));
    let n = rng.random_range(lo..=hi.max(lo));
    let c = t / 2.0;
    let ring = 0.19 * t;
    let phase = rng.random_range(0.0..TAU);
    let cyto = jitter_hsv(rng, [0.60, 0.26, 0.80]);
    let nuc = darker(jitter_hsv(rng, NUCLEUS), 0.15, 0.08);
    let mut centers = Vec::with_capacity(n);
    let cr = m.cytoplasm_radius.sample(rng) * t;
    for k in 0..n {
        let a = phase + TAU * k as f64 / n as f64 + rng.random_range(-0.15..0.15);
        let (x, y) = (c + ring * a.cos(), c + ring * a.sin());
        layers.push(Layer { blob: Blob { ecc: 0.15, angle: a, ..Blob::round(x, y, cr) }, hsv: cyto });
        centers.push((a, x, y));
    }
    let nr = r0 * m.nucleus_ratio.sample(rng);
    for &(a, x, y) in &centers {
        // nuclei pushed outward, away from the rosette lumen
        let d = 0.35 * cr;
        layers.push(Layer { blob: Blob::round(x + d * a.cos(), y + d * a.sin(), nr), hsv: nuc });
    }
    attrs.push(Attribute::GlandularCluster);
    CellGeometry { nucleus_radius: nr, reference_radius: r0, cytoplasm_radius: cr, nuclei: n, halo: false }
}

/// Renders one cell tile. Deterministic given the generator state.
pub fn render_cell(
    class: CellClass,
    stain: &Stain,
    spec: &RenderSpec,
    vocab: &DescriptionVocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<RenderedCell> {
    let mut layers = Vec::new();
    let mut attributes = Vec::new();
    let geometry = match class {
        CellClass::Nilm => {
            attributes.push(Attribute::Normal);
            nilm_layers(spec, rng, &mut layers)
        }
        CellClass::Agc => glandular_layers(spec, rng, &mut layers, &mut attributes),
        _ => squamous_lesion_layers(class, spec, rng, &mut layers, &mut attributes),
    };
    let img = rasterize(spec.tile_size, &layers, stain, rng);
    let descriptions = assign_descriptions(class, &attributes, vocab)?;
    let mut image = CellImage::from_rgb(&img);
    image.latent_label = Some(class);
    image.latent_descriptions = Some(descriptions);
    Ok(RenderedCell {
        image,
        attributes,
        geometry,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub shifted_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 50,
            shifted_test: 50,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::ShiftedTest => self.shifted_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub render: RenderSpec,
    pub splits: SplitSizes,
    pub cells_per_wsi: usize,
    /// Slide-level class prevalence, indexed by class id.
    pub prevalence: [f64; NUM_CLASSES],
    /// Fraction of cells on a positive slide that are lesion cells.
    pub positive_density: f64,
    /// Fraction of positive training cells that carry a visible label.
    pub annotation_budget: f64,
    /// Fraction of cells on negative training slides labelled NILM.
    pub negative_label_fraction: f64,
    pub train_domains: Vec<String>,
    pub shifted_domains: Vec<String>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        // 78.8% negative; positives split 47.8% ASC-US, 23.8% LSIL, rest high-grade/glandular
        let pos = 0.212;
        Self {
            render: RenderSpec::default(),
            splits: SplitSizes::default(),
            cells_per_wsi: 300,
            prevalence: [0.788, pos * 0.478, pos * 0.238, pos * 0.184, pos * 0.100],
            positive_density: 0.05,
            annotation_budget: 0.035,
            negative_label_fraction: 0.02,
            train_domains: vec!["A".into(), "B".into()],
            shifted_domains: vec!["C".into()],
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        let total: f64 = self.prevalence.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.prevalence.iter().any(|p| *p < 0.0) {
            return Err(Error::param("prevalence", format!("must be non-negative and sum to 1 (got {total})")));
        }
        if !(self.annotation_budget > 0.0 && self.annotation_budget <= 1.0) {
            return Err(Error::param("annotation_budget", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.negative_label_fraction) {
            return Err(Error::param("negative_label_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.positive_density) {
            return Err(Error::param("positive_density", "must lie in [0, 1]"));
        }
        if self.cells_per_wsi == 0 {
            return Err(Error::param("cells_per_wsi", "must be positive"));
        }
        if self.train_domains.is_empty() || self.shifted_domains.is_empty() {
            return Err(Error::param("domains", "train and shifted domain lists must be non-empty"));
        }
        for d in self.train_domains.iter().chain(&self.shifted_domains) {
            self.render.domain(d)?;
        }
        if let Some(d) = self.shifted_domains.iter().find(|d| self.train_domains.contains(d)) {
            return Err(Error::param("shifted_domains", format!("`{d}` is also a training domain")));
        }
        Ok(())
    }
}

/// A slide: ordered cell instances plus slide-level label and domain.
#[derive(Clone, Debug, PartialEq)]
pub struct WsiBag {
    pub id: String,
    pub instances: Vec<CellImage>,
    pub label: CellClass,
    pub domain: String,
    pub split: Split,
}

impl WsiBag {
    pub fn latent_labels(&self) -> Option<Vec<CellClass>> {
        self.instances.iter().map(|c| c.latent_label).collect()
    }
}

/// Independent generator for `(seed, stream)`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Cell classes for one slide, before shuffling.
fn slide_cell_classes<R: Rng + ?Sized>(
    slide_class: CellClass,
    config: &CorpusConfig,
    rng: &mut R,
) -> Result<Vec<CellClass>> {
    let n = config.cells_per_wsi;
    let mut classes = vec![CellClass::Nilm; n];
    if slide_class.is_positive() {
        if config.positive_density <= 0.0 {
            return Err(Error::param("positive_density", "a positive slide needs lesion cells"));
        }
        let n_pos = ((config.positive_density * n as f64).round() as usize).clamp(1, n);
        let severity = Severity::default();
        let lower: Vec<CellClass> = CellClass::ALL
            .iter()
            .copied()
            .filter(|c| c.is_positive() && severity.rank(*c) < severity.rank(slide_class))
            .collect();
        for (i, slot) in classes.iter_mut().take(n_pos).enumerate() {
            *slot = if i == 0 || lower.is_empty() || rng.random_bool(0.6) {
                slide_class
            } else {
                lower[rng.random_range(0..lower.len())]
            };
        }
    }
    Ok(classes)
}

/// Generates one slide whose max latent label equals `slide_class`.
pub fn generate_wsi_bag(
    id: &str,
    slide_class: CellClass,
    domain: &StainDomain,
    split: Split,
    config: &CorpusConfig,
    vocab: &DescriptionVocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<WsiBag> {
    let mut classes = slide_cell_classes(slide_class, config, rng)?;
    // Fisher-Yates with the slide's own generator keeps placement reproducible.
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let stain = domain.sample_slide(rng);
    let instances = classes
        .iter()
        .map(|&c| render_cell(c, &stain, &config.render, vocab, rng).map(|r| r.image))
        .collect::<Result<Vec<_>>>()?;
    Ok(WsiBag {
        id: id.to_string(),
        instances,
        label: slide_class,
        domain: domain.name.clone(),
        split,
    })
}

/// Exact per-class slide counts by largest-remainder rounding.
fn stratified_counts(n: usize, prevalence: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let raw: Vec<f64> = prevalence.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; NUM_CLASSES];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    // keep both binary classes present whenever the split can hold them
    let positives: usize = counts[1..].iter().sum();
    if n >= 2 && positives == 0 {
        counts[0] -= 1;
        counts[1] += 1;
    } else if n >= 2 && counts[0] == 0 {
        let donor = (1..NUM_CLASSES).max_by_key(|&i| counts[i]).unwrap();
        counts[donor] -= 1;
        counts[0] += 1;
    }
    counts
}

/// Number of labelled cells for a budget: `floor(budget * total)`, at least one
/// when anything is available.
pub fn labelled_count(budget: f64, total: usize) -> usize {
    if total == 0 {
        return 0;
    }
    (((budget * total as f64) + 1e-9).floor() as usize).clamp(1, total)
}

/// Generates the full corpus in memory.
pub fn generate_corpus(config: &CorpusConfig, vocab: &DescriptionVocabulary) -> Result<Corpus> {
    config.validate()?;
    let mut manifest = Manifest::new(config.render.tile_size, vocab.version());
    let mut bags = Vec::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let n = config.splits.get(split);
        if n == 0 {
            continue;
        }
        let domains = match split {
            Split::ShiftedTest => &config.shifted_domains,
            _ => &config.train_domains,
        };
        let counts = stratified_counts(n, &config.prevalence);
        let mut slide_classes: Vec<CellClass> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(CellClass::ALL[c], k))
            .collect();
        let mut order_rng = substream(config.seed, 1_000_000 + si as u64);
        for i in (1..slide_classes.len()).rev() {
            let j = order_rng.random_range(0..=i);
            slide_classes.swap(i, j);
        }
        for (i, &sc) in slide_classes.iter().enumerate() {
            let id = format!("{}-{:04}", split.as_str(), i);
            let domain = config.render.domain(&domains[i % domains.len()])?;
            let mut rng = substream(config.seed, ((si as u64) << 32) | i as u64);
            bags.push(generate_wsi_bag(&id, sc, domain, split, config, vocab, &mut rng)?);
        }
    }
    annotate_training_cells(&mut bags, config);

    let mut oracle = Vec::with_capacity(bags.len());
    for bag in &bags {
        manifest.records.push(WsiRecord {
            wsi_id: bag.id.clone(),
            label: bag.label.name().to_string(),
            domain: bag.domain.clone(),
            split: bag.split,
            cells: bag
                .instances
                .iter()
                .enumerate()
                .map(|(i, c)| CellEntry {
                    path: Corpus::tile_path(&bag.id, i),
                    label: c.label.map(|l| l.name().to_string()),
                    descriptions: c.description_labels.clone(),
                })
                .collect(),
        });
        oracle.push(OracleRecord {
            wsi_id: bag.id.clone(),
            cells: bag
                .instances
                .iter()
                .map(|c| OracleCell {
                    latent_label: c.latent_label.expect("rendered cells carry latents"),
                    latent_descriptions: c.latent_descriptions.clone().unwrap_or_default(),
                })
                .collect(),
        });
    }
    Ok(Corpus::new(manifest, bags, Some(oracle)))
}

/// Reveals labels (and descriptions) for the budgeted subset of training cells.
fn annotate_training_cells(bags: &mut [WsiBag], config: &CorpusConfig) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (b, bag) in bags.iter().enumerate() {
        if bag.split != Split::Train {
            continue;
        }
        for (i, cell) in bag.instances.iter().enumerate() {
            match cell.latent_label {
                Some(c) if c.is_positive() => positives.push((b, i)),
                Some(_) if !bag.label.is_positive() => negatives.push((b, i)),
                _ => {}
            }
        }
    }
    let mut rng = substream(config.seed, 2_000_000);
    let n_pos = labelled_count(config.annotation_budget, positives.len());
    let n_neg = if config.negative_label_fraction > 0.0 {
        labelled_count(config.negative_label_fraction, negatives.len())
    } else {
        0
    };
    let chosen_pos = sample(&mut rng, positives.len(), n_pos);
    let chosen_neg = sample(&mut rng, negatives.len(), n_neg);
    for (pool, chosen) in [(&positives, chosen_pos), (&negatives, chosen_neg)] {
        for k in chosen.iter() {
            let (b, i) = pool[k];
            let cell = &mut bags[b].instances[i];
            cell.label = cell.latent_label;
            cell.description_labels = cell.latent_descriptions.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::bag_label_from_cells;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            render: RenderSpec {
                tile_size: 32,
                ..RenderSpec::default()
            },
            splits: SplitSizes {
                train: 12,
                val: 3,
                test: 3,
                shifted_test: 4,
            },
            cells_per_wsi: 40,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn default_render_spec_is_valid() {
        RenderSpec::default().validate().unwrap();
        CorpusConfig::default().validate().unwrap();
    }

    #[test]
    fn same_seed_renders_identical_pixels() {
        let spec = RenderSpec::default();
        let vocab = DescriptionVocabulary::builtin();
        let stain = spec.domain("A").unwrap().nominal();
        let a = render_cell(CellClass::Nilm, &stain, &spec, &vocab, &mut substream(7, 0)).unwrap();
        let b = render_cell(CellClass::Nilm, &stain, &spec, &vocab, &mut substream(7, 0)).unwrap();
        assert_eq!(a.image.pixels, b.image.pixels);
        let c = render_cell(CellClass::Nilm, &stain, &spec, &vocab, &mut substream(8, 0)).unwrap();
        assert_ne!(a.image.pixels, c.image.pixels);
    }

    #[test]
    fn asc_us_enlargement_in_range() {
        let spec = RenderSpec::default();
        let vocab = DescriptionVocabulary::builtin();
        let stain = Stain::neutral();
        for s in 0..50 {
            let r = render_cell(CellClass::AscUs, &stain, &spec, &vocab, &mut substream(s, 1)).unwrap();
            let e = r.geometry.enlargement();
            assert!((2.5..=3.0).contains(&e), "enlargement {e}");
        }
    }

    #[test]
    fn asc_us_nucleus_area_measured_from_pixels() {
        // Count dark-nucleus pixels on a noise-free, regular-contour render.
        let mut spec = RenderSpec::default();
        spec.morphology[CellClass::AscUs.id()].irregular_prob = 0.0;
        spec.morphology[CellClass::AscUs.id()].hyperchromasia_prob = 0.0;
        let vocab = DescriptionVocabulary::builtin();
        let stain = Stain::neutral();
        for s in 0..10 {
            let r = render_cell(CellClass::AscUs, &stain, &spec, &vocab, &mut substream(s, 2)).unwrap();
            let img = r.image.rgb();
            let dark = img.pixels().filter(|p| crate::color::rgb_to_hsv(*p)[2] < 0.6).count() as f64;
            let measured = (dark / std::f64::consts::PI).sqrt() / r.geometry.reference_radius;
            assert!((2.3..=3.2).contains(&measured), "measured ratio {measured}");
        }
    }

    #[test]
    fn lsil_halo_drives_description() {
        let spec = RenderSpec::default();
        let vocab = DescriptionVocabulary::builtin();
        let halo_idx = vocab.index_of(Attribute::PerinuclearHalo.description()).unwrap();
        let enl_idx = vocab.index_of(Attribute::EnlargementOver3.description()).unwrap();
        let mut saw_halo = false;
        for s in 0..40 {
            let r = render_cell(CellClass::Lsil, &Stain::neutral(), &spec, &vocab, &mut substream(s, 3)).unwrap();
            let d = r.image.latent_descriptions.as_ref().unwrap();
            assert_eq!(d[halo_idx] == 1, r.geometry.halo);
            assert_eq!(d[enl_idx], 1);
            assert!(r.geometry.enlargement() > 3.0);
            saw_halo |= r.geometry.halo;
        }
        assert!(saw_halo);
    }

    #[test]
    fn high_grade_has_high_nc_ratio() {
        let spec = RenderSpec::default();
        let vocab = DescriptionVocabulary::builtin();
        for s in 0..30 {
            let r = render_cell(CellClass::AscHHsil, &Stain::neutral(), &spec, &vocab, &mut substream(s, 4)).unwrap();
            assert!(r.geometry.nc_ratio() > spec.high_nc_ratio);
        }
    }

    #[test]
    fn agc_renders_clusters() {
        let spec = RenderSpec::default();
        let vocab = DescriptionVocabulary::builtin();
        for s in 0..10 {
            let r = render_cell(CellClass::Agc, &Stain::neutral(), &spec, &vocab, &mut substream(s, 5)).unwrap();
            assert!(r.geometry.nuclei >= 3);
            assert_eq!(vocab.decode(r.image.latent_descriptions.as_ref().unwrap()), [ATYPICAL_GLANDULAR]);
        }
    }

    #[test]
    fn description_examples() {
        let vocab = DescriptionVocabulary::builtin();
        let nilm = assign_descriptions(CellClass::Nilm, &[Attribute::Normal], &vocab).unwrap();
        assert_eq!(vocab.decode(&nilm), [NORMAL_CELL]);
        let agc = assign_descriptions(CellClass::Agc, &[Attribute::GlandularCluster, Attribute::Hyperchromasia], &vocab).unwrap();
        assert_eq!(vocab.decode(&agc), [ATYPICAL_GLANDULAR]);
        let lsil = assign_descriptions(
            CellClass::Lsil,
            &[Attribute::EnlargementOver3, Attribute::PerinuclearHalo],
            &vocab,
        )
        .unwrap();
        let got = vocab.decode(&lsil);
        assert!(got.contains(&Attribute::EnlargementOver3.description()));
        assert!(got.contains(&Attribute::PerinuclearHalo.description()));
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn attribute_outside_vocabulary_is_rejected() {
        let json = r#"{"vocabulary_version":1,"classes":[{"class":"NILM","descriptions":["normal cell"]}]}"#;
        let vocab = DescriptionVocabulary::from_json(json).unwrap();
        let err = assign_descriptions(CellClass::Lsil, &[Attribute::PerinuclearHalo], &vocab).unwrap_err();
        assert!(matches!(err, Error::NotInVocabulary(_)));
    }

    #[test]
    fn negative_bag_is_all_nilm_and_positive_bag_peaks_at_slide_class() {
        let config = CorpusConfig { cells_per_wsi: 300, ..small_config() };
        let vocab = DescriptionVocabulary::builtin();
        let dom = config.render.domain("A").unwrap();
        let neg = generate_wsi_bag("n", CellClass::Nilm, dom, Split::Train, &config, &vocab, &mut substream(1, 0)).unwrap();
        assert!(neg.latent_labels().unwrap().iter().all(|c| *c == CellClass::Nilm));
        let pos = generate_wsi_bag("p", CellClass::AscHHsil, dom, Split::Train, &config, &vocab, &mut substream(1, 1)).unwrap();
        assert_eq!(bag_label_from_cells(&pos.latent_labels().unwrap()).unwrap(), CellClass::AscHHsil);
    }

    #[test]
    fn zero_density_positive_slide_is_rejected() {
        let config = CorpusConfig { positive_density: 0.0, ..small_config() };
        let vocab = DescriptionVocabulary::builtin();
        let dom = config.render.domain("A").unwrap();
        let err = generate_wsi_bag("p", CellClass::Lsil, dom, Split::Train, &config, &vocab, &mut substream(1, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "positive_density", .. }));
    }

    #[test]
    fn labelled_count_rounding() {
        assert_eq!(labelled_count(0.035, 10_000), 350);
        assert_eq!(labelled_count(1.0, 17), 17);
        assert_eq!(labelled_count(0.01, 5), 1);
        assert_eq!(labelled_count(0.5, 0), 0);
    }

    #[test]
    fn stratified_counts_sum_and_keep_both_classes() {
        let p = CorpusConfig::default().prevalence;
        for n in 2..60 {
            let c = stratified_counts(n, &p);
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c[0] > 0 && c[1..].iter().sum::<usize>() > 0);
        }
    }

    #[test]
    fn full_budget_labels_every_positive_training_cell() {
        let config = CorpusConfig { annotation_budget: 1.0, ..small_config() };
        let corpus = generate_corpus(&config, &DescriptionVocabulary::builtin()).unwrap();
        for bag in corpus.bags().iter().filter(|b| b.split == Split::Train) {
            for c in &bag.instances {
                if c.latent_label.unwrap().is_positive() {
                    assert_eq!(c.label, c.latent_label);
                    assert!(c.description_labels.is_some());
                }
            }
        }
    }

    #[test]
    fn shifted_domains_are_disjoint_from_training() {
        let mut config = small_config();
        config.shifted_domains = vec!["A".into()];
        assert!(config.validate().is_err());
        let config = small_config();
        let corpus = generate_corpus(&config, &DescriptionVocabulary::builtin()).unwrap();
        for bag in corpus.bags() {
            match bag.split {
                Split::ShiftedTest => assert_eq!(bag.domain, "C"),
                _ => assert!(bag.domain == "A" || bag.domain == "B"),
            }
        }
    }
}
