//! Colour-adversarial training: one global additive colour shift per image,
//! in RGB or HSV, pointed along the loss gradient and scaled to radius rho.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use stride_autograd::{Graph, Var};

use crate::augment::{augment_strong, StrongAugConfig};
use crate::color::{hsv_to_rgb, hsv_to_rgb_jacobian, rgb_to_hsv};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::image::{CellImage, RgbImage};
use crate::manifest::Split;
use crate::model::{batch_grad_to_hwc, cell_logits, encode, rgb_batch, BagHead, ModelBundle};
use crate::swift::{refresh_topk, LabelledPool, Optimizers};
use crate::taxonomy::CellClass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Hsv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpacePolicy {
    /// Draw RGB or HSV with equal probability for every batch.
    Random,
    Rgb,
    Hsv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Seeded uniform direction on the sphere, scaled to rho.
    RandomDirection,
    /// Leave the image unperturbed.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorAdvConfig {
    pub rho_rgb: f64,
    pub rho_hsv: f64,
    pub space_policy: SpacePolicy,
    pub fallback: Fallback,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cell_batch: usize,
    pub wsi_batch: usize,
    pub top_k: usize,
    pub class_balanced: bool,
    pub strong_aug: StrongAugConfig,
}

impl Default for ColorAdvConfig {
    fn default() -> Self {
        Self {
            rho_rgb: 0.1,
            rho_hsv: 0.1,
            space_policy: SpacePolicy::Random,
            fallback: Fallback::RandomDirection,
            iterations: 500,
            lr: 3e-4,
            weight_decay: 1e-3,
            cell_batch: 128,
            wsi_batch: 2,
            top_k: 256,
            class_balanced: true,
            strong_aug: StrongAugConfig::default(),
        }
    }
}

impl ColorAdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_rgb > 0.0) || !(self.rho_hsv > 0.0) {
            return Err(Error::param("rho", "must be positive"));
        }
        if self.cell_batch == 0 || self.wsi_batch == 0 || self.top_k == 0 {
            return Err(Error::param("coloradv", "batch sizes and K must be at least 1"));
        }
        Ok(())
    }

    pub fn rho(&self, space: ColorSpace) -> f64 {
        match space {
            ColorSpace::Rgb => self.rho_rgb,
            ColorSpace::Hsv => self.rho_hsv,
        }
    }

    pub fn pick_space<R: Rng + ?Sized>(&self, rng: &mut R) -> ColorSpace {
        match self.space_policy {
            SpacePolicy::Rgb => ColorSpace::Rgb,
            SpacePolicy::Hsv => ColorSpace::Hsv,
            SpacePolicy::Random => {
                if rng.random_bool(0.5) {
                    ColorSpace::Rgb
                } else {
                    ColorSpace::Hsv
                }
            }
        }
    }
}

/// Shifts every pixel by `r`. RGB adds and clamps; HSV adds with hue
/// wrapping (in turns) and S/V clamped, then converts back.
pub fn apply_perturbation(img: &RgbImage, r: [f64; 3], space: ColorSpace) -> RgbImage {
    let mut out = img.clone();
    match space {
        ColorSpace::Rgb => out.map_pixels(|p| [0, 1, 2].map(|c| (p[c] + r[c]).clamp(0.0, 1.0))),
        ColorSpace::Hsv => out.map_pixels(|p| {
            let [h, s, v] = rgb_to_hsv(p);
            hsv_to_rgb([
                (h + r[0]).rem_euclid(1.0),
                (s + r[1]).clamp(0.0, 1.0),
                (v + r[2]).clamp(0.0, 1.0),
            ])
        }),
    }
    out.clamp_unit();
    out
}

/// Gradient w.r.t. the global shift at `r = 0`, from the gradient w.r.t. the
/// image's pixels (HWC). Clamps are treated as identity at the origin.
pub fn shift_gradient(img: &RgbImage, pixel_grad: &[f64], space: ColorSpace) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (px, dl) in img.pixels().zip(pixel_grad.chunks_exact(3)) {
        match space {
            ColorSpace::Rgb => {
                for c in 0..3 {
                    g[c] += dl[c];
                }
            }
            ColorSpace::Hsv => {
                let j = hsv_to_rgb_jacobian(rgb_to_hsv(px));
                for k in 0..3 {
                    g[k] += (0..3).map(|c| j[c][k] * dl[c]).sum::<f64>();
                }
            }
        }
    }
    g
}

/// Per-image colour gradients for an arbitrary differentiable loss given as a
/// function returning pixel gradients (HWC, one vector per image).
pub fn color_grad_with(
    images: &[RgbImage],
    space: ColorSpace,
    pixel_grads: impl FnOnce(&[RgbImage]) -> Vec<Vec<f64>>,
) -> Result<Vec<[f64; 3]>> {
    let grads = pixel_grads(images);
    if grads.len() != images.len() {
        return Err(Error::Shape(format!("{} pixel gradients for {} images", grads.len(), images.len())));
    }
    let out: Vec<[f64; 3]> = images.iter().zip(&grads).map(|(img, g)| shift_gradient(img, g, space)).collect();
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("colour gradient".into()));
    }
    Ok(out)
}

/// `rho * g / |g|`; a zero gradient falls back per `fallback`. Returns the
/// shift and whether the fallback fired.
pub fn adv_perturbation<R: Rng + ?Sized>(g: [f64; 3], rho: f64, fallback: Fallback, rng: &mut R) -> ([f64; 3], bool) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        return (g.map(|v| rho * v / norm), false);
    }
    match fallback {
        Fallback::Zero => ([0.0; 3], true),
        Fallback::RandomDirection => (random_direction(rho, rng), true),
    }
}

/// Uniform direction on the sphere of radius `rho`.
pub fn random_direction<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.map(|x| rho * x / n);
        }
    }
}

/// Classification losses over a labelled cell group and slide groups laid out
/// consecutively in one image batch.
struct BatchLayout<'a> {
    labels: &'a [CellClass],
    bags: &'a [(usize, CellClass)],
}

/// Builds `sum_cells CE + sum_bags CE` (per-item sums, so each image's
/// gradient is independent of batch composition) or the mean version.
fn batch_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    params: (&stride_autograd::BoundParams, &stride_autograd::BoundParams, &stride_autograd::BoundParams),
    x: Var,
    layout: &BatchLayout<'_>,
    summed: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Var, Var) {
    let (ps, pc, pw) = params;
    let z = encode(g, ps, &bundle.config, x);
    let n_l = layout.labels.len();
    let mut cell = g.constant(stride_autograd::Tensor::scalar(0.0));
    if n_l > 0 {
        let zl = g.slice_rows(z, 0, n_l);
        let l = cell_logits(g, pc, zl);
        let t: Vec<usize> = layout.labels.iter().map(|c| c.id()).collect();
        cell = g.cross_entropy(l, &t, &vec![1.0; n_l]);
        if summed {
            cell = g.scale(cell, n_l as f64);
        }
    }
    let head = bundle.head();
    let mut wsi = g.constant(stride_autograd::Tensor::scalar(0.0));
    let mut offset = n_l;
    for &(k, label) in layout.bags {
        let zb = g.slice_rows(z, offset, offset + k);
        let l = head.forward(g, pw, zb, rng.as_deref_mut());
        let ce = g.cross_entropy(l, &[label.id()], &[1.0]);
        wsi = g.add(wsi, ce);
        offset += k;
    }
    if !summed && !layout.bags.is_empty() {
        wsi = g.scale(wsi, 1.0 / layout.bags.len() as f64);
    }
    (cell, wsi)
}

/// Colour gradient of the classification loss for each image of a batch
/// (labelled cells first, then slide groups), in evaluation mode.
pub fn color_grad(
    bundle: &ModelBundle,
    images: &[RgbImage],
    labels: &[CellClass],
    bags: &[(usize, CellClass)],
    space: ColorSpace,
) -> Result<Vec<[f64; 3]>> {
    let expected = labels.len() + bags.iter().map(|b| b.0).sum::<usize>();
    if images.len() != expected || images.is_empty() {
        return Err(Error::Shape(format!("{} images for a layout of {expected}", images.len())));
    }
    color_grad_with(images, space, |imgs| {
        let mut g = Graph::new();
        let ps = bundle.student.bind(&mut g, false);
        let pc = bundle.cell_head.bind(&mut g, false);
        let pw = bundle.wsi_head.bind(&mut g, false);
        let x = g.leaf(rgb_batch(imgs));
        let layout = BatchLayout { labels, bags };
        let (cell, wsi) = batch_loss(&mut g, bundle, (&ps, &pc, &pw), x, &layout, true, None);
        let total = g.add(cell, wsi);
        let grads = g.backward(total);
        match grads.get(x) {
            Some(gx) => batch_grad_to_hwc(gx),
            None => vec![vec![0.0; imgs[0].data().len()]; imgs.len()],
        }
    })
}

/// Mean cell classification loss of a labelled batch, evaluation mode.
pub fn cell_batch_loss(bundle: &ModelBundle, images: &[RgbImage], labels: &[CellClass]) -> f64 {
    let mut g = Graph::new();
    let ps = bundle.student.bind(&mut g, false);
    let pc = bundle.cell_head.bind(&mut g, false);
    let x = g.constant(rgb_batch(images));
    let z = encode(&mut g, &ps, &bundle.config, x);
    let l = cell_logits(&mut g, &pc, z);
    let t: Vec<usize> = labels.iter().map(|c| c.id()).collect();
    let loss = g.cross_entropy(l, &t, &vec![1.0; t.len()]);
    g.value(loss).item()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorAdvLosses {
    pub clean: f64,
    pub adversarial: f64,
    pub total: f64,
    pub space: ColorSpace,
    pub fallbacks: usize,
}

/// One min-max alternation: adversarial shifts from the current model, then
/// a descent step on `L(X + r_adv) + L(X)`.
pub fn coloradv_step(
    bundle: &mut ModelBundle,
    opt: &mut Optimizers,
    labelled: &[(&CellImage, CellClass)],
    bags: &[(Vec<&CellImage>, CellClass)],
    cfg: &ColorAdvConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ColorAdvLosses> {
    let mut clean: Vec<RgbImage> = labelled.iter().map(|(c, _)| augment_strong(&c.rgb(), &cfg.strong_aug, rng)).collect();
    let labels: Vec<CellClass> = labelled.iter().map(|(_, c)| *c).collect();
    let mut layout_bags = Vec::new();
    for (cells, label) in bags {
        if cells.is_empty() {
            continue;
        }
        clean.extend(cells.iter().map(|c| augment_strong(&c.rgb(), &cfg.strong_aug, rng)));
        layout_bags.push((cells.len(), *label));
    }
    if clean.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let space = cfg.pick_space(rng);
    let rho = cfg.rho(space);
    let grads = color_grad(bundle, &clean, &labels, &layout_bags, space)?;
    let mut fallbacks = 0;
    let adv: Vec<RgbImage> = clean
        .iter()
        .zip(&grads)
        .map(|(img, g)| {
            let (r, fell_back) = adv_perturbation(*g, rho, cfg.fallback, rng);
            fallbacks += fell_back as usize;
            apply_perturbation(img, r, space)
        })
        .collect();

    let mut g = Graph::new();
    let ps = bundle.student.bind(&mut g, true);
    let pc = bundle.cell_head.bind(&mut g, true);
    let pw = bundle.wsi_head.bind(&mut g, true);
    let layout = BatchLayout { labels: &labels, bags: &layout_bags };
    let xc = g.constant(rgb_batch(&clean));
    let xa = g.constant(rgb_batch(&adv));
    let (c1, w1) = batch_loss(&mut g, bundle, (&ps, &pc, &pw), xc, &layout, false, Some(rng));
    let (c2, w2) = batch_loss(&mut g, bundle, (&ps, &pc, &pw), xa, &layout, false, Some(rng));
    let lc = g.add(c1, w1);
    let la = g.add(c2, w2);
    let total = g.add(lc, la);
    let out = ColorAdvLosses {
        clean: g.value(lc).item(),
        adversarial: g.value(la).item(),
        total: g.value(total).item(),
        space,
        fallbacks,
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("colour-adversarial loss (clean={}, adv={})", out.clean, out.adversarial)));
    }
    let gr = g.backward(total);
    opt.encoder.step(&mut bundle.student, &ps.grads(&gr), lr);
    opt.cell_head.step(&mut bundle.cell_head, &pc.grads(&gr), lr);
    opt.wsi_head.step(&mut bundle.wsi_head, &pw.grads(&gr), lr);
    Ok(out)
}

/// Fine-tuning phase over the training split after joint training.
pub fn train_coloradv(
    mut bundle: ModelBundle,
    corpus: &Corpus,
    cfg: &ColorAdvConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, &ColorAdvLosses),
) -> Result<ModelBundle> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(bundle);
    }
    let bags = corpus.split(Split::Train);
    if bags.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let pool = LabelledPool::from_corpus(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizers::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut topk = Vec::new();
    let mut cursor = order.len();
    for it in 0..cfg.iterations {
        if cursor >= order.len() {
            topk = refresh_topk(&bundle, &bags, cfg.top_k)?;
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.wsi_batch).min(order.len());
        let batch_bags: Vec<(Vec<&CellImage>, CellClass)> = order[cursor..end]
            .iter()
            .map(|&b| (topk[b].iter().map(|&i| &bags[b].instances[i]).collect(), bags[b].label))
            .collect();
        cursor = end;
        let labelled = pool.sample(cfg.cell_batch, cfg.class_balanced, &mut rng);
        let lr = cfg.lr * (1.0 - it as f64 / cfg.iterations as f64);
        let l = coloradv_step(&mut bundle, &mut opt, &labelled, &batch_bags, cfg, lr, &mut rng)?;
        on_step(it, &l);
    }
    Ok(bundle)
}
