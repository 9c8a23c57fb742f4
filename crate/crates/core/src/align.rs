//! Cell/description alignment: a small text encoder trained against frozen
//! cell features, and threshold-based description selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stride_autograd::optim::{Adam, AdamConfig};
use stride_autograd::{init, BoundParams, Graph, ParamStore, Tensor, Var};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::image::CellImage;
use crate::manifest::Split;
use crate::model::{linear, EncoderRole, ModelBundle};
use crate::vocab::DescriptionVocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cosine threshold for selecting a description.
    pub lambda: f64,
    pub hash_buckets: usize,
    /// Training logits are `logit_scale * (cos - lambda)`, so the sigmoid
    /// crosses one half at the selection threshold. At scale 1 and lambda 0
    /// this is the plain loss, whose sigmoid only spans [0.27, 0.73]; rare
    /// descriptions then collapse onto the all-negative solution.
    pub logit_scale: f64,
    /// Character n-gram length used alongside whole words.
    pub ngram: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-4,
            weight_decay: 1e-2,
            lambda: 0.5,
            hash_buckets: 1024,
            logit_scale: 10.0,
            ngram: 3,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > -1.0 && self.lambda < 1.0) {
            return Err(Error::param("lambda", "must lie in (-1, 1)"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::param("logit_scale", "must be positive and finite"));
        }
        if self.batch == 0 || self.hash_buckets == 0 || self.ngram == 0 {
            return Err(Error::param("align", "batch, hash_buckets and ngram must be positive"));
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Word and boundary-marked character n-gram tokens.
pub fn tokenize(text: &str, ngram: usize) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        out.push(format!("w:{word}"));
        let marked: Vec<char> = format!("<{word}>").chars().collect();
        if marked.len() >= ngram {
            for win in marked.windows(ngram) {
                out.push(format!("c:{}", win.iter().collect::<String>()));
            }
        }
    }
    out
}

/// Text encoder, image-side projection and their hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignModel {
    pub config: AlignConfig,
    pub text: ParamStore,
    pub image_proj: ParamStore,
}

impl AlignModel {
    pub fn new(config: AlignConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = ParamStore::new();
        text.insert("embed", init::uniform(&mut rng, &[config.hash_buckets, dim], 1.0));
        text.insert("proj.w", init::xavier_uniform(&mut rng, &[dim, dim], dim, dim));
        text.insert("proj.b", Tensor::zeros([dim]));
        let mut image_proj = ParamStore::new();
        image_proj.insert("img.w", init::xavier_uniform(&mut rng, &[dim, dim], dim, dim));
        image_proj.insert("img.b", Tensor::zeros([dim]));
        Ok(Self { config, text, image_proj })
    }

    /// `[N, buckets]` mean-pooling matrix over hashed tokens.
    fn pooling(&self, vocab: &DescriptionVocabulary) -> Tensor {
        let b = self.config.hash_buckets;
        let mut data = vec![0.0; vocab.len() * b];
        for (i, entry) in vocab.entries().iter().enumerate() {
            let toks = tokenize(entry, self.config.ngram);
            let w = 1.0 / toks.len().max(1) as f64;
            for t in toks {
                data[i * b + (fnv1a(&t) % b as u64) as usize] += w;
            }
        }
        Tensor::new([vocab.len(), b], data).unwrap()
    }

    fn text_forward(&self, g: &mut Graph, p: &BoundParams, pooling: &Tensor) -> Var {
        let pool = g.constant(pooling.clone());
        let pooled = g.matmul(pool, p.var("embed"));
        linear(g, p, "proj", pooled)
    }

    /// Description features `T: [N, D]`.
    pub fn encode_descriptions(&self, vocab: &DescriptionVocabulary) -> Result<Tensor> {
        if vocab.is_empty() {
            return Err(Error::Empty("description vocabulary"));
        }
        let mut g = Graph::new();
        let p = self.text.bind(&mut g, false);
        let t = self.text_forward(&mut g, &p, &self.pooling(vocab));
        Ok(g.value(t).clone())
    }

    /// Projected cell features `V: [B, D]` from encoder embeddings.
    pub fn image_features(&self, z: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = self.image_proj.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let v = linear(&mut g, &p, "img", zv);
        g.value(v).clone()
    }
}

fn check_rows(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    for i in 0..t.rows() {
        if t.row(i).iter().all(|v| *v == 0.0) {
            return Err(Error::param("features", format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

fn alignment_loss_var(g: &mut Graph, v: Var, t: Var, y: &[f64], n_desc: usize, scale: f64, shift: f64) -> Var {
    let vn = g.normalize_rows(v);
    let tn = g.normalize_rows(t);
    let tt = g.transpose(tn);
    let cos = g.matmul(vn, tt);
    let sim = if scale == 1.0 && shift == 0.0 {
        cos
    } else {
        let offset = g.constant(Tensor::new([n_desc], vec![-shift; n_desc]).unwrap());
        let shifted = g.add_row(cos, offset);
        g.scale(shifted, scale)
    };
    let bs = g.value(sim).rows();
    let mut yt = vec![0.0; y.len()];
    for i in 0..bs {
        for j in 0..n_desc {
            yt[j * bs + i] = y[i * n_desc + j];
        }
    }
    let a = g.bce_with_logits(sim, y);
    let st = g.transpose(sim);
    let b = g.bce_with_logits(st, &yt);
    g.add(a, b)
}

/// Symmetric binary cross-entropy on the sigmoid of the row-wise cosine
/// similarity matrix `cos(V, T)` against the multi-hot targets, plus the
/// same on the transposed matrix.
pub fn alignment_loss(v: &Tensor, t: &Tensor, y: &[Vec<u8>]) -> Result<f64> {
    scaled_alignment_loss(v, t, y, 1.0, 0.0)
}

/// [`alignment_loss`] on logits `scale * (cos - shift)`.
pub fn scaled_alignment_loss(v: &Tensor, t: &Tensor, y: &[Vec<u8>], scale: f64, shift: f64) -> Result<f64> {
    if v.cols() != t.cols() || y.len() != v.rows() || y.iter().any(|r| r.len() != t.rows()) {
        return Err(Error::Shape(format!(
            "V {:?}, T {:?}, {} target rows",
            v.shape(),
            t.shape(),
            y.len()
        )));
    }
    check_rows(v, "V")?;
    check_rows(t, "T")?;
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let tv = g.constant(t.clone());
    let flat: Vec<f64> = y.iter().flatten().map(|&b| b as f64).collect();
    let l = alignment_loss_var(&mut g, vv, tv, &flat, t.rows(), scale, shift);
    Ok(g.value(l).item())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarity of `v` to every description row.
pub fn description_sims(v: &[f64], t: &Tensor) -> Result<Vec<f64>> {
    if v.iter().all(|x| *x == 0.0) {
        return Err(Error::param("features", "cell feature has zero norm"));
    }
    if v.len() != t.cols() {
        return Err(Error::Shape(format!("feature of length {} against T {:?}", v.len(), t.shape())));
    }
    Ok((0..t.rows()).map(|i| cosine(v, t.row(i))).collect())
}

/// Indices (vocabulary order) of descriptions with similarity strictly above `lambda`.
pub fn select_descriptions(v: &[f64], t: &Tensor, lambda: f64) -> Result<Vec<usize>> {
    Ok(description_sims(v, t)?
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > lambda)
        .map(|(i, _)| i)
        .collect())
}

/// Micro-averaged F1 over all (cell, description) decisions.
pub fn micro_f1(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Shape("prediction and truth matrices differ".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            match (a != 0, b != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Labelled training cells that carry description labels.
fn described_cells(corpus: &Corpus, vocab_len: usize) -> Result<Vec<(&CellImage, &Vec<u8>)>> {
    let mut out = Vec::new();
    for bag in corpus.bags().iter().filter(|b| b.split == Split::Train) {
        for c in &bag.instances {
            if let Some(d) = &c.description_labels {
                if d.len() != vocab_len {
                    return Err(Error::Shape(format!("description vector of length {} for a vocabulary of {vocab_len}", d.len())));
                }
                if d.iter().any(|&x| x != 0) {
                    out.push((c, d));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("description labels in the training split"));
    }
    Ok(out)
}

/// Trains the text encoder and image-side projection; the cell encoder is
/// only read. Returns the model and the mean loss per epoch.
pub fn train_align(
    bundle: &ModelBundle,
    corpus: &Corpus,
    vocab: &DescriptionVocabulary,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<(AlignModel, Vec<f64>)> {
    cfg.validate()?;
    let cells = described_cells(corpus, vocab.len())?;
    let mut model = AlignModel::new(cfg.clone(), bundle.config.embed_dim, seed)?;
    let refs: Vec<&CellImage> = cells.iter().map(|(c, _)| *c).collect();
    let z = bundle.embed_cells(EncoderRole::Student, &refs);
    let pooling = model.pooling(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let (mut opt_t, mut opt_i) = (Adam::new(adam_cfg), Adam::new(adam_cfg));
    let mut order: Vec<usize> = (0..cells.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let zb = crate::model::gather(&z, chunk);
            let y: Vec<f64> = chunk.iter().flat_map(|&i| cells[i].1.iter().map(|&b| b as f64)).collect();
            let mut g = Graph::new();
            let pt = model.text.bind(&mut g, true);
            let pi = model.image_proj.bind(&mut g, true);
            let zv = g.constant(zb);
            let v = linear(&mut g, &pi, "img", zv);
            let t = model.text_forward(&mut g, &pt, &pooling);
            let loss = alignment_loss_var(&mut g, v, t, &y, vocab.len(), cfg.logit_scale, cfg.lambda);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite("alignment loss".into()));
            }
            sum += lv;
            batches += 1;
            let grads = g.backward(loss);
            opt_t.step(&mut model.text, &pt.grads(&grads), cfg.lr);
            opt_i.step(&mut model.image_proj, &pi.grads(&grads), cfg.lr);
        }
        history.push(sum / batches as f64);
    }
    Ok((model, history))
}

/// Per-cell explanation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellExplanation {
    pub cell_id: String,
    pub predicted_class: String,
    pub positive_score: f64,
    pub descriptions: Vec<String>,
    pub sims: Vec<f64>,
}

/// Selected descriptions (multi-hot) for encoder embeddings `z`.
pub fn predict_descriptions(model: &AlignModel, vocab: &DescriptionVocabulary, z: &Tensor, lambda: f64) -> Result<Vec<Vec<u8>>> {
    let t = model.encode_descriptions(vocab)?;
    let v = model.image_features(z);
    (0..v.rows())
        .map(|i| {
            let sel = select_descriptions(v.row(i), &t, lambda)?;
            let mut hot = vec![0u8; vocab.len()];
            for j in sel {
                hot[j] = 1;
            }
            Ok(hot)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn hand_computed_losses() {
        let v = Tensor::new([1, 2], vec![0.6, 0.8]).unwrap();
        let l = alignment_loss(&v, &v, &[vec![1]]).unwrap();
        assert!((l - 0.62652).abs() < 1e-4, "{l}");
        let t = Tensor::new([1, 2], vec![-0.6, -0.8]).unwrap();
        let l = alignment_loss(&v, &t, &[vec![0]]).unwrap();
        assert!((l - 0.62652).abs() < 1e-4, "{l}");
    }

    #[test]
    fn scaled_loss_is_centred_on_the_threshold() {
        let v = Tensor::new([1, 2], vec![0.6, 0.8]).unwrap();
        assert_eq!(scaled_alignment_loss(&v, &v, &[vec![1]], 1.0, 0.0).unwrap(), alignment_loss(&v, &v, &[vec![1]]).unwrap());
        // cos = 1, logit 10 * 0.5 = 5 on both terms
        let l = scaled_alignment_loss(&v, &v, &[vec![1]], 10.0, 0.5).unwrap();
        assert!((l - 2.0 * (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12, "{l}");
        // at cos = lambda the logit is zero whatever the scale
        let t = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let l = scaled_alignment_loss(&v, &t, &[vec![0]], 7.0, 0.6).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_norm_is_rejected() {
        let v = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert!(alignment_loss(&v, &t, &[vec![1]]).is_err());
        assert!(select_descriptions(&[0.0, 0.0], &t, 0.5).is_err());
    }

    #[test]
    fn selection_examples() {
        // unit rows at angles whose cosines with e1 are 0.6, 0.2 and 0.9
        let rows: Vec<Vec<f64>> = [0.6f64, 0.2, 0.9].iter().map(|c| vec![*c, (1.0 - c * c).sqrt()]).collect();
        let t = Tensor::from_rows(&rows);
        assert_eq!(select_descriptions(&[1.0, 0.0], &t, 0.5).unwrap(), [0, 2]);
        assert!(select_descriptions(&[1.0, 0.0], &t, 0.95).unwrap().is_empty());
        assert_eq!(select_descriptions(&[1.0, 0.0], &t, -1.0).unwrap(), [0, 1, 2]);
    }

    #[test]
    fn symmetric_targets_give_equal_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = init::uniform(&mut rng, &[3, 4], 1.0);
        let y: Vec<Vec<u8>> = (0..3).map(|i| (0..3).map(|j| (i == j || i + j == 2) as u8).collect()).collect();
        let full = alignment_loss(&v, &v, &y).unwrap();
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let vn = g.normalize_rows(vv);
        let tt = g.transpose(vn);
        let s = g.matmul(vn, tt);
        let flat: Vec<f64> = y.iter().flatten().map(|&b| b as f64).collect();
        let first = g.bce_with_logits(s, &flat);
        assert!((full - 2.0 * g.value(first).item()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant_and_monotone(
            seed in 0u64..10_000,
            scale in 0.01..100.0f64,
            l1 in -0.99..0.99f64,
            l2 in -0.99..0.99f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = init::uniform(&mut rng, &[6, 5], 1.0);
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            prop_assert_eq!(select_descriptions(&v, &t, l1).unwrap(), select_descriptions(&scaled, &t, l1).unwrap());
            let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
            let wide = select_descriptions(&v, &t, lo).unwrap();
            for i in select_descriptions(&v, &t, hi).unwrap() {
                prop_assert!(wide.contains(&i));
            }
        }

        #[test]
        fn transposed_roles_give_same_loss(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = init::uniform(&mut rng, &[4, 3], 1.0);
            let t = init::uniform(&mut rng, &[4, 3], 1.0);
            let y: Vec<Vec<u8>> = (0..4).map(|_| (0..4).map(|_| rng.random_bool(0.4) as u8).collect()).collect();
            let yt: Vec<Vec<u8>> = (0..4).map(|j| (0..4).map(|i| y[i][j]).collect()).collect();
            let a = alignment_loss(&v, &t, &y).unwrap();
            let b = alignment_loss(&t, &v, &yt).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn description_encoding_is_deterministic_and_shaped() {
        let vocab = DescriptionVocabulary::builtin();
        let m = AlignModel::new(AlignConfig::default(), 8, 0).unwrap();
        let a = m.encode_descriptions(&vocab).unwrap();
        assert_eq!(a.shape(), &[vocab.len(), 8]);
        assert_eq!(a, m.encode_descriptions(&vocab).unwrap());
    }

    #[test]
    fn micro_f1_cases() {
        assert_eq!(micro_f1(&[vec![1, 0]], &[vec![1, 0]]).unwrap(), 1.0);
        assert!((micro_f1(&[vec![1, 1]], &[vec![1, 0]]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tokens_include_words_and_ngrams() {
        let t = tokenize("Normal cell", 3);
        assert!(t.contains(&"w:normal".to_string()));
        assert!(t.contains(&"c:<ce".to_string()));
    }
}
