//! Semi- and weakly-supervised joint training: a labelled cell stream, a
//! slide-label stream over top-K cells, and mean-teacher pseudo-labels
//! refined by Grad-CAM over the slide head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stride_autograd::optim::{Adam, AdamConfig};
use stride_autograd::{Graph, Tensor, Var};

use crate::augment::{augment_strong, augment_weak, StrongAugConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::image::{CellImage, RgbImage};
use crate::manifest::Split;
use crate::model::{
    cell_logits, ema_update, encode, gather, gradcam_scores, rgb_batch, softmax, BagHead, EncoderRole,
    ModelBundle,
};
use crate::taxonomy::{CellClass, NUM_CLASSES};
use crate::topk::topk_select;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwiftConfig {
    pub cell_batch: usize,
    pub wsi_batch: usize,
    pub top_k: usize,
    /// CAM threshold, applied after per-bag min-max normalization.
    pub tau_cam: f64,
    /// Teacher confidence threshold.
    pub tau_conf: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Run supervised cell pretraining first.
    pub warm_start: bool,
    /// Clamp negative CAM weights to zero before normalization.
    pub rectify_cam: bool,
    /// Draw labelled cells uniformly over classes rather than over cells.
    pub class_balanced: bool,
    pub strong_aug: StrongAugConfig,
}

impl Default for SwiftConfig {
    fn default() -> Self {
        Self {
            cell_batch: 128,
            wsi_batch: 2,
            top_k: 256,
            tau_cam: 0.5,
            tau_conf: 0.9,
            ema_decay: 0.999,
            lr: 1e-3,
            weight_decay: 1e-3,
            iterations: 2000,
            warm_start: true,
            rectify_cam: false,
            class_balanced: true,
            strong_aug: StrongAugConfig::default(),
        }
    }
}

impl SwiftConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_cam", self.tau_cam), ("tau_conf", self.tau_conf)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::param(name, format!("{v} is outside (0, 1)")));
            }
        }
        if self.cell_batch == 0 || self.wsi_batch == 0 || self.top_k == 0 {
            return Err(Error::param("swift", "batch sizes and K must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::param("ema_decay", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        Ok(())
    }
}

/// Supervised warm start of the student encoder and cell head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch: 64,
            lr: 1e-3,
            weight_decay: 1e-3,
        }
    }
}

/// Slide head trained on frozen encoder features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub wsi_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            wsi_batch: 2,
            lr: 1e-3,
            weight_decay: 1e-3,
        }
    }
}

/// Per-bag min-max normalization to `[0, 1]`; a constant bag maps to zeros.
pub fn normalize_cam(beta: &[f64]) -> Vec<f64> {
    let lo = beta.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    beta.iter()
        .map(|b| if span > 0.0 { (b - lo) / span } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub beta: Vec<f64>,
    pub teacher_probs: Vec<Vec<f64>>,
    pub y_refine: Vec<usize>,
    pub mask: Vec<bool>,
    /// True where the CAM branch set the label.
    pub cam_branch: Vec<bool>,
}

impl PseudoLabelBatch {
    pub fn mask_rate(&self) -> f64 {
        rate(&self.mask)
    }

    pub fn cam_rate(&self) -> f64 {
        rate(&self.cam_branch)
    }
}

fn rate(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0)
}

/// CAM branch first (`beta > tau_cam` gives the slide class), then teacher
/// confidence (`max prob > tau_conf` gives its argmax), else masked out.
pub fn refine_pseudo_labels(
    beta: &[f64],
    teacher_probs: &[Vec<f64>],
    wsi_class: usize,
    tau_cam: f64,
    tau_conf: f64,
) -> Result<PseudoLabelBatch> {
    if wsi_class >= NUM_CLASSES {
        return Err(Error::InvalidClass(wsi_class));
    }
    for (name, v) in [("tau_cam", tau_cam), ("tau_conf", tau_conf)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::param(name, format!("{v} is outside (0, 1)")));
        }
    }
    if beta.len() != teacher_probs.len() {
        return Err(Error::Shape(format!("{} CAM weights for {} teacher rows", beta.len(), teacher_probs.len())));
    }
    let n = beta.len();
    let mut out = PseudoLabelBatch {
        beta: beta.to_vec(),
        teacher_probs: teacher_probs.to_vec(),
        y_refine: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
        cam_branch: Vec::with_capacity(n),
    };
    for (b, p) in beta.iter().zip(teacher_probs) {
        let top = argmax(p);
        if *b > tau_cam {
            out.y_refine.push(wsi_class);
            out.mask.push(true);
            out.cam_branch.push(true);
        } else if p[top] > tau_conf {
            out.y_refine.push(top);
            out.mask.push(true);
            out.cam_branch.push(false);
        } else {
            // masked; the label is never read
            out.y_refine.push(top);
            out.mask.push(false);
            out.cam_branch.push(false);
        }
    }
    Ok(out)
}

/// Mean cross-entropy over unmasked rows; zero with no gradient when
/// everything is masked.
pub fn masked_class_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = g.value(logits).rows();
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape(format!("{n} logit rows, {} targets, {} mask entries", targets.len(), mask.len())));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(g.cross_entropy(logits, targets, &weights))
}

/// One optimizer per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub encoder: Adam,
    pub cell_head: Adam,
    pub wsi_head: Adam,
}

impl Optimizers {
    pub fn new(weight_decay: f64) -> Self {
        let cfg = AdamConfig {
            weight_decay,
            ..AdamConfig::default()
        };
        Self {
            encoder: Adam::new(cfg),
            cell_head: Adam::new(cfg),
            wsi_head: Adam::new(cfg),
        }
    }
}

/// A slide in the weak stream: its already-distilled top-K cells and label.
#[derive(Clone, Debug)]
pub struct WsiItem<'a> {
    pub instances: Vec<&'a CellImage>,
    pub label: CellClass,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cell_sup: f64,
    pub wsi_sup: f64,
    pub semi_weak: f64,
    pub total: f64,
    pub mask_rate: f64,
    pub cam_rate: f64,
}

fn scalar_sum(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

fn teacher_probs(bundle: &ModelBundle, images: &[RgbImage]) -> Vec<Vec<f64>> {
    if images.is_empty() {
        return Vec::new();
    }
    let mut g = Graph::new();
    let pt = bundle.teacher.bind(&mut g, false);
    let pc = bundle.cell_head.bind(&mut g, false);
    let x = g.constant(rgb_batch(images));
    let z = encode(&mut g, &pt, &bundle.config, x);
    let l = cell_logits(&mut g, &pc, z);
    let lv = g.value(l);
    (0..lv.rows()).map(|i| softmax(lv.row(i))).collect()
}

fn check_finite(losses: &StepLosses) -> Result<()> {
    if losses.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "training loss (cell_sup={}, wsi_sup={}, semi_weak={})",
            losses.cell_sup, losses.wsi_sup, losses.semi_weak
        )))
    }
}

/// One joint update. Backpropagates `L_cell_sup + L_wsi_sup + L_semi_weak`
/// into the student encoder, cell head and slide head, then moves the teacher
/// toward the student.
pub fn swift_step(
    bundle: &mut ModelBundle,
    opt: &mut Optimizers,
    labelled: &[(&CellImage, CellClass)],
    wsi: &[WsiItem<'_>],
    cfg: &SwiftConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    if labelled.is_empty() && wsi.iter().all(|w| w.instances.is_empty()) {
        return Err(Error::Empty("training batch"));
    }
    let aug = &cfg.strong_aug;
    let mut strong: Vec<RgbImage> = labelled.iter().map(|(c, _)| augment_strong(&c.rgb(), aug, rng)).collect();
    let n_l = strong.len();
    let mut weak = Vec::new();
    for item in wsi {
        for c in &item.instances {
            let img = c.rgb();
            strong.push(augment_strong(&img, aug, rng));
            weak.push(augment_weak(&img, rng));
        }
    }
    let t_probs = teacher_probs(bundle, &weak);

    let head = bundle.head();
    let mut g = Graph::new();
    let ps = bundle.student.bind(&mut g, true);
    let pc = bundle.cell_head.bind(&mut g, true);
    let pw = bundle.wsi_head.bind(&mut g, true);
    let x = g.constant(rgb_batch(&strong));
    let z = encode(&mut g, &ps, &bundle.config, x);
    let logits = cell_logits(&mut g, &pc, z);
    let zero = g.constant(Tensor::scalar(0.0));

    let l_cell = if n_l > 0 {
        let ll = g.slice_rows(logits, 0, n_l);
        let targets: Vec<usize> = labelled.iter().map(|(_, c)| c.id()).collect();
        g.cross_entropy(ll, &targets, &vec![1.0; n_l])
    } else {
        zero
    };

    let mut wsi_terms = Vec::new();
    let mut y_refine = Vec::new();
    let mut mask = Vec::new();
    let mut cam = Vec::new();
    let mut offset = n_l;
    for item in wsi {
        let k = item.instances.len();
        if k == 0 {
            continue;
        }
        let zb = g.slice_rows(z, offset, offset + k);
        let wl = head.forward(&mut g, &pw, zb, Some(rng));
        wsi_terms.push(g.cross_entropy(wl, &[item.label.id()], &[1.0]));
        let mut beta = gradcam_scores(&head, &bundle.wsi_head, g.value(zb), item.label.id())?;
        if cfg.rectify_cam {
            beta.iter_mut().for_each(|b| *b = b.max(0.0));
        }
        let pl = refine_pseudo_labels(
            &normalize_cam(&beta),
            &t_probs[offset - n_l..offset - n_l + k],
            item.label.id(),
            cfg.tau_cam,
            cfg.tau_conf,
        )?;
        y_refine.extend(pl.y_refine);
        mask.extend(pl.mask);
        cam.extend(pl.cam_branch);
        offset += k;
    }
    let (l_wsi, l_semi) = if wsi_terms.is_empty() {
        (zero, zero)
    } else {
        let s = scalar_sum(&mut g, &wsi_terms);
        let l_wsi = g.scale(s, 1.0 / wsi_terms.len() as f64);
        let lu = g.slice_rows(logits, n_l, offset);
        (l_wsi, masked_class_loss(&mut g, lu, &y_refine, &mask)?)
    };
    let total = scalar_sum(&mut g, &[l_cell, l_wsi, l_semi]);
    let losses = StepLosses {
        cell_sup: g.value(l_cell).item(),
        wsi_sup: g.value(l_wsi).item(),
        semi_weak: g.value(l_semi).item(),
        total: g.value(total).item(),
        mask_rate: rate(&mask),
        cam_rate: rate(&cam),
    };
    check_finite(&losses)?;

    let grads = g.backward(total);
    opt.encoder.step(&mut bundle.student, &ps.grads(&grads), lr);
    opt.cell_head.step(&mut bundle.cell_head, &pc.grads(&grads), lr);
    opt.wsi_head.step(&mut bundle.wsi_head, &pw.grads(&grads), lr);
    ema_update(&mut bundle.teacher, &bundle.student, cfg.ema_decay)?;
    Ok(losses)
}

/// Training-log record, one per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwiftLogRecord {
    pub iter: usize,
    #[serde(rename = "L_cell_sup")]
    pub l_cell_sup: f64,
    #[serde(rename = "L_wsi_sup")]
    pub l_wsi_sup: f64,
    #[serde(rename = "L_semi_weak")]
    pub l_semi_weak: f64,
    pub mask_rate: f64,
    pub cam_rate: f64,
}

/// Labelled training cells grouped by class.
#[derive(Clone, Debug)]
pub struct LabelledPool<'a> {
    by_class: Vec<Vec<&'a CellImage>>,
}

impl<'a> LabelledPool<'a> {
    pub fn from_corpus(corpus: &'a Corpus) -> Self {
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for bag in corpus.bags().iter().filter(|b| b.split == Split::Train) {
            for cell in &bag.instances {
                if let Some(c) = cell.label {
                    by_class[c.id()].push(cell);
                }
            }
        }
        Self { by_class }
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.by_class[class.id()].len()
    }

    pub fn sample(&self, n: usize, balanced: bool, rng: &mut ChaCha8Rng) -> Vec<(&'a CellImage, CellClass)> {
        let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| !self.by_class[c].is_empty()).collect();
        if present.is_empty() {
            return Vec::new();
        }
        let total = self.len();
        (0..n)
            .map(|_| {
                let (c, i) = if balanced {
                    let c = present[rng.random_range(0..present.len())];
                    (c, rng.random_range(0..self.by_class[c].len()))
                } else {
                    let mut j = rng.random_range(0..total);
                    let mut c = 0;
                    while j >= self.by_class[c].len() {
                        j -= self.by_class[c].len();
                        c += 1;
                    }
                    (c, j)
                };
                (self.by_class[c][i], CellClass::ALL[c])
            })
            .collect()
    }
}

/// Top-K cell indices of every bag by the student's positive score.
pub fn refresh_topk(bundle: &ModelBundle, bags: &[&crate::synthgen::WsiBag], k: usize) -> Result<Vec<Vec<usize>>> {
    bags.iter()
        .map(|b| {
            let refs: Vec<&CellImage> = b.instances.iter().collect();
            topk_select(&bundle.positive_scores(&refs), k)
        })
        .collect()
}

fn linear_decay(lr: f64, it: usize, total: usize) -> f64 {
    lr * (1.0 - it as f64 / total.max(1) as f64)
}

/// Supervised training of the student encoder and cell head on labelled
/// cells; the teacher is reset to the result.
pub fn pretrain_cells(bundle: &mut ModelBundle, corpus: &Corpus, cfg: &PretrainConfig, aug: &StrongAugConfig, balanced: bool, seed: u64) -> Result<Vec<f64>> {
    let pool = LabelledPool::from_corpus(corpus);
    if pool.is_empty() && cfg.iterations > 0 {
        return Err(Error::Empty("labelled training cells"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizers::new(cfg.weight_decay);
    let swift_cfg = SwiftConfig {
        strong_aug: aug.clone(),
        ema_decay: 0.0,
        ..SwiftConfig::default()
    };
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = pool.sample(cfg.batch, balanced, &mut rng);
        let lr = linear_decay(cfg.lr, it, cfg.iterations);
        let l = swift_step(bundle, &mut opt, &batch, &[], &swift_cfg, lr, &mut rng)?;
        losses.push(l.cell_sup);
    }
    bundle.teacher = bundle.student.clone();
    Ok(losses)
}

/// Frozen-feature baseline: top-K by the (fixed) cell scorer, embeddings from
/// the frozen encoder, and only the slide head trained.
pub fn train_frozen_head(bundle: &mut ModelBundle, corpus: &Corpus, cfg: &HeadConfig, k: usize, seed: u64) -> Result<Vec<f64>> {
    let bags = corpus.split(Split::Train);
    if bags.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let topk = refresh_topk(bundle, &bags, k)?;
    let feats: Vec<(Tensor, usize)> = bags
        .iter()
        .zip(&topk)
        .map(|(b, idx)| {
            let cells: Vec<&CellImage> = idx.iter().map(|&i| &b.instances[i]).collect();
            (bundle.embed_cells(EncoderRole::Student, &cells), b.label.id())
        })
        .collect();
    let head = bundle.head();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.wsi_batch.max(1));
    let total = cfg.epochs * steps_per_epoch;
    let mut history = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.wsi_batch.max(1)) {
            let mut g = Graph::new();
            let pw = bundle.wsi_head.bind(&mut g, true);
            let terms: Vec<Var> = chunk
                .iter()
                .map(|&i| {
                    let zb = g.constant(feats[i].0.clone());
                    let l = head.forward(&mut g, &pw, zb, Some(&mut rng));
                    g.cross_entropy(l, &[feats[i].1], &[1.0])
                })
                .collect();
            let s = scalar_sum(&mut g, &terms);
            let loss = g.scale(s, 1.0 / terms.len() as f64);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite("slide head loss".into()));
            }
            epoch_loss += v;
            let grads = g.backward(loss);
            opt.step(&mut bundle.wsi_head, &pw.grads(&grads), linear_decay(cfg.lr, step, total));
            step += 1;
        }
        history.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok(history)
}

/// Joint training over the training split. Top-K membership is re-ranked by
/// the current student at the start of every pass over the slides.
pub fn train_swift(
    mut bundle: ModelBundle,
    corpus: &Corpus,
    cfg: &SwiftConfig,
    seed: u64,
    mut on_log: impl FnMut(&SwiftLogRecord),
) -> Result<(ModelBundle, Vec<SwiftLogRecord>)> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok((bundle, Vec::new()));
    }
    let bags = corpus.split(Split::Train);
    if bags.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if bags.iter().any(|b| b.instances.first().is_some_and(|c| c.size != bundle.config.tile_size)) {
        return Err(Error::Shape(format!("corpus tiles do not match model tile size {}", bundle.config.tile_size)));
    }
    let pool = LabelledPool::from_corpus(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizers::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut topk: Vec<Vec<usize>> = Vec::new();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if cursor >= order.len() {
            topk = refresh_topk(&bundle, &bags, cfg.top_k)?;
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.wsi_batch).min(order.len());
        let items: Vec<WsiItem> = order[cursor..end]
            .iter()
            .map(|&b| WsiItem {
                instances: topk[b].iter().map(|&i| &bags[b].instances[i]).collect(),
                label: bags[b].label,
            })
            .collect();
        cursor = end;
        let labelled = pool.sample(cfg.cell_batch, cfg.class_balanced, &mut rng);
        let lr = linear_decay(cfg.lr, it, cfg.iterations);
        let l = swift_step(&mut bundle, &mut opt, &labelled, &items, cfg, lr, &mut rng)?;
        let rec = SwiftLogRecord {
            iter: it,
            l_cell_sup: l.cell_sup,
            l_wsi_sup: l.wsi_sup,
            l_semi_weak: l.semi_weak,
            mask_rate: l.mask_rate,
            cam_rate: l.cam_rate,
        };
        on_log(&rec);
        log.push(rec);
    }
    Ok((bundle, log))
}

/// Slide-head logits over a bag's top-K embeddings in evaluation mode.
pub fn bag_topk_embeddings(bundle: &ModelBundle, cells: &[&CellImage], k: usize) -> Result<(Vec<usize>, Tensor)> {
    let z = bundle.embed_cells(EncoderRole::Student, cells);
    let scores: Vec<f64> = bundle.cell_probs(&z).iter().map(|p| 1.0 - p[0]).collect();
    let idx = topk_select(&scores, k)?;
    let zk = gather(&z, &idx);
    Ok((idx, zk))
}
