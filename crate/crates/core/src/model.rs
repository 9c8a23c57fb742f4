//! Cell encoder, cell classifier, attention-MIL slide head and checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stride_autograd::{init, BoundParams, Conv2dSpec, Graph, ParamStore, Tensor, Var};

use crate::align::AlignModel;
use crate::error::{Error, Result};
use crate::image::{CellImage, RgbImage};
use crate::taxonomy::{CellClass, NUM_CLASSES, TAXONOMY_VERSION};
use crate::topk::topk_select;

pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;
const EMBED_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tile_size: usize,
    /// Output channels of the stride-2 convolution stages.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub mlp_hidden: usize,
    /// Linear layers in the slide MLP, output layer included.
    pub mlp_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            channels: vec![16, 32, 64],
            embed_dim: 128,
            attention_hidden: 128,
            mlp_hidden: 128,
            mlp_layers: 4,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::param("channels", "need at least one non-empty stage"));
        }
        if self.embed_dim == 0 || self.attention_hidden == 0 || self.mlp_hidden == 0 {
            return Err(Error::param("model", "layer widths must be positive"));
        }
        if self.mlp_layers == 0 {
            return Err(Error::param("mlp_layers", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", "must lie in [0, 1)"));
        }
        if self.tile_size >> self.channels.len() == 0 {
            return Err(Error::param("tile_size", "too small for the number of stages"));
        }
        Ok(())
    }
}

fn name(prefix: &str, field: &str) -> String {
    format!("{prefix}.{field}")
}

fn insert_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(name(prefix, "w"), init::xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out));
    store.insert(name(prefix, "b"), Tensor::zeros([fan_out]));
}

/// `x W + b` with `W: [in, out]`.
pub fn linear(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let y = g.matmul(x, p.var(&name(prefix, "w")));
    g.add_row(y, p.var(&name(prefix, "b")))
}

/// Dropout in training mode; identity when `rng` is `None` or `rate` is 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask = (0..g.value(x).len())
                .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

pub fn init_encoder(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut in_ch = 3;
    for (i, &out) in cfg.channels.iter().enumerate() {
        let fan_in = in_ch * 9;
        store.insert(format!("conv{i}.w"), init::kaiming_uniform(rng, &[out, in_ch, 3, 3], fan_in));
        store.insert(format!("conv{i}.b"), Tensor::zeros([out]));
        in_ch = out;
    }
    insert_linear(&mut store, rng, "proj", in_ch, cfg.embed_dim);
    store
}

/// Encoder forward: `[B, 3, T, T] -> [B, D]`.
pub fn encode(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, x: Var) -> Var {
    let mut h = x;
    for i in 0..cfg.channels.len() {
        let (w, b) = (p.var(&format!("conv{i}.w")), p.var(&format!("conv{i}.b")));
        h = g.conv2d(h, w, b, Conv2dSpec { stride: 2, padding: 1 });
        h = g.layer_norm_rows(h, LN_EPS);
        h = g.relu(h);
    }
    let shape = g.value(h).shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let flat = g.reshape(h, [b * c, shape[2] * shape[3]]);
    let pooled = g.mean_rows(flat);
    let pooled = g.reshape(pooled, [b, c]);
    linear(g, p, "proj", pooled)
}

/// Pixel values in `[0, 1]` centred to `[-0.5, 0.5]`, laid out `[B, 3, T, T]`.
pub fn cell_batch(cells: &[&CellImage]) -> Tensor {
    let t = cells.first().map_or(0, |c| c.size);
    let mut data = vec![0.0; cells.len() * 3 * t * t];
    for (b, cell) in cells.iter().enumerate() {
        assert_eq!(cell.size, t, "mixed tile sizes in a batch");
        let base = b * 3 * t * t;
        for (p, px) in cell.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * t * t + p] = px[c] as f64 / 255.0 - 0.5;
            }
        }
    }
    Tensor::new([cells.len(), 3, t, t], data).unwrap()
}

/// Same layout as [`cell_batch`] from floating-point images.
pub fn rgb_batch(images: &[RgbImage]) -> Tensor {
    let t = images.first().map_or(0, |c| c.size());
    let mut data = vec![0.0; images.len() * 3 * t * t];
    for (b, img) in images.iter().enumerate() {
        assert_eq!(img.size(), t, "mixed tile sizes in a batch");
        let base = b * 3 * t * t;
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * t * t + p] = px[c] - 0.5;
            }
        }
    }
    Tensor::new([images.len(), 3, t, t], data).unwrap()
}

/// Gradient w.r.t. a [`rgb_batch`] input mapped back to per-image HWC layout.
pub fn batch_grad_to_hwc(grad: &Tensor) -> Vec<Vec<f64>> {
    let s = grad.shape();
    let (n, t2) = (s[0], s[2] * s[3]);
    (0..n)
        .map(|b| {
            let src = &grad.data()[b * 3 * t2..(b + 1) * 3 * t2];
            let mut out = vec![0.0; 3 * t2];
            for p in 0..t2 {
                for c in 0..3 {
                    out[p * 3 + c] = src[c * t2 + p];
                }
            }
            out
        })
        .collect()
}

pub fn init_cell_head(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    insert_linear(&mut store, rng, "cell", cfg.embed_dim, NUM_CLASSES);
    store
}

pub fn cell_logits(g: &mut Graph, p: &BoundParams, z: Var) -> Var {
    linear(g, p, "cell", z)
}

/// A slide-level aggregator over instance embeddings.
pub trait BagHead {
    fn n_classes(&self) -> usize;

    /// `z: [K, D]` -> logits `[1, n_classes]`. Dropout is active iff `rng` is given.
    fn forward(&self, g: &mut Graph, p: &BoundParams, z: Var, rng: Option<&mut ChaCha8Rng>) -> Var;
}

/// Gated attention pooling followed by an MLP with LayerNorm, GELU and dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMil {
    pub cfg: ModelConfig,
}

impl AttentionMil {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { cfg: cfg.clone() }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let c = &self.cfg;
        let mut store = ParamStore::new();
        insert_linear(&mut store, rng, "attn.v", c.embed_dim, c.attention_hidden);
        insert_linear(&mut store, rng, "attn.u", c.embed_dim, c.attention_hidden);
        insert_linear(&mut store, rng, "attn.w", c.attention_hidden, 1);
        let mut width = c.embed_dim;
        for i in 0..c.mlp_layers - 1 {
            let prefix = format!("mlp{i}");
            insert_linear(&mut store, rng, &prefix, width, c.mlp_hidden);
            store.insert(name(&prefix, "ln_g"), Tensor::full([c.mlp_hidden], 1.0));
            store.insert(name(&prefix, "ln_b"), Tensor::zeros([c.mlp_hidden]));
            width = c.mlp_hidden;
        }
        insert_linear(&mut store, rng, "out", width, NUM_CLASSES);
        store
    }

    /// Attention weights `[1, K]` over instances.
    pub fn attention(&self, g: &mut Graph, p: &BoundParams, z: Var) -> Var {
        let v = linear(g, p, "attn.v", z);
        let v = g.tanh(v);
        let u = linear(g, p, "attn.u", z);
        let u = g.sigmoid(u);
        let gated = g.mul(v, u);
        let s = linear(g, p, "attn.w", gated);
        let k = g.value(s).rows();
        let s = g.reshape(s, [1, k]);
        g.softmax_rows(s)
    }

    /// Attention weights in evaluation mode.
    pub fn attention_weights(&self, params: &ParamStore, z: &Tensor) -> Result<Vec<f64>> {
        check_bag(z)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let a = self.attention(&mut g, &p, zv);
        Ok(g.value(a).data().to_vec())
    }
}

impl BagHead for AttentionMil {
    fn n_classes(&self) -> usize {
        NUM_CLASSES
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, z: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let a = self.attention(g, p, z);
        let mut h = g.matmul(a, z);
        for i in 0..self.cfg.mlp_layers - 1 {
            let prefix = format!("mlp{i}");
            h = linear(g, p, &prefix, h);
            h = g.layer_norm_rows(h, LN_EPS);
            h = g.mul_row(h, p.var(&name(&prefix, "ln_g")));
            h = g.add_row(h, p.var(&name(&prefix, "ln_b")));
            h = g.gelu(h);
            h = dropout(g, h, self.cfg.dropout, rng.as_deref_mut());
        }
        linear(g, p, "out", h)
    }
}

/// Mean of instance embeddings followed by one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanPoolLinear {
    pub embed_dim: usize,
}

impl MeanPoolLinear {
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        insert_linear(&mut store, rng, "out", self.embed_dim, NUM_CLASSES);
        store
    }
}

impl BagHead for MeanPoolLinear {
    fn n_classes(&self) -> usize {
        NUM_CLASSES
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, z: Var, _rng: Option<&mut ChaCha8Rng>) -> Var {
        let zt = g.transpose(z);
        let m = g.mean_rows(zt);
        let d = g.value(m).len();
        let m = g.reshape(m, [1, d]);
        linear(g, p, "out", m)
    }
}

fn check_bag(z: &Tensor) -> Result<()> {
    if z.shape().len() != 2 || z.rows() == 0 {
        return Err(Error::Shape(format!("bag embeddings must be [K>0, D], got {:?}", z.shape())));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("bag embeddings".into()));
    }
    Ok(())
}

/// Slide logits in evaluation mode.
pub fn bag_logits(head: &dyn BagHead, params: &ParamStore, z: &Tensor) -> Result<Vec<f64>> {
    check_bag(z)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let out = head.forward(&mut g, &p, zv, None);
    Ok(g.value(out).data().to_vec())
}

/// Grad-CAM instance weights: the gradient of the class-`class` logit w.r.t.
/// each instance embedding, averaged over the embedding dimension.
pub fn gradcam_scores(head: &dyn BagHead, params: &ParamStore, z: &Tensor, class: usize) -> Result<Vec<f64>> {
    check_bag(z)?;
    if class >= head.n_classes() {
        return Err(Error::InvalidClass(class));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let zv = g.leaf(z.clone());
    let logits = head.forward(&mut g, &p, zv, None);
    let y = g.index(logits, class);
    let grads = g.backward(y);
    let d = z.cols() as f64;
    let gz = grads.get(zv).expect("embeddings are a leaf");
    Ok((0..z.rows()).map(|k| gz.row(k).iter().sum::<f64>() / d).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("ema_alpha", format!("{alpha} is outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student parameters differ in layout".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Which encoder weights to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderRole {
    Student,
    Teacher,
}

/// Every trained parameter of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub cell_head: ParamStore,
    pub wsi_head: ParamStore,
    #[serde(default)]
    pub align: Option<AlignModel>,
}

/// Slide-level inference result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BagPrediction {
    pub probs: Vec<f64>,
    /// Cell indices fed to the slide head, best first.
    pub topk: Vec<usize>,
    /// `1 - P(NILM)` per cell from the cell classifier.
    pub cell_scores: Vec<f64>,
}

impl BagPrediction {
    pub fn predicted_class(&self) -> CellClass {
        let best = (0..self.probs.len()).max_by(|&a, &b| self.probs[a].total_cmp(&self.probs[b])).unwrap_or(0);
        CellClass::from_id(best).expect("head has one output per class")
    }
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = init_encoder(&config, &mut rng);
        let cell_head = init_cell_head(&config, &mut rng);
        let wsi_head = AttentionMil::new(&config).init(&mut rng);
        Ok(Self {
            teacher: student.clone(),
            student,
            cell_head,
            wsi_head,
            config,
            align: None,
        })
    }

    pub fn head(&self) -> AttentionMil {
        AttentionMil::new(&self.config)
    }

    pub fn encoder(&self, role: EncoderRole) -> &ParamStore {
        match role {
            EncoderRole::Student => &self.student,
            EncoderRole::Teacher => &self.teacher,
        }
    }

    /// Embeddings `[N, D]` in evaluation mode.
    pub fn embed_cells(&self, role: EncoderRole, cells: &[&CellImage]) -> Tensor {
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(cells.len() * d);
        for chunk in cells.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let p = self.encoder(role).bind(&mut g, false);
            let x = g.constant(cell_batch(chunk));
            let z = encode(&mut g, &p, &self.config, x);
            data.extend_from_slice(g.value(z).data());
        }
        Tensor::new([cells.len(), d], data).unwrap()
    }

    /// Cell class probabilities for embeddings `[N, D]`.
    pub fn cell_probs(&self, z: &Tensor) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.cell_head.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let logits = cell_logits(&mut g, &p, zv);
        let lv = g.value(logits);
        (0..lv.rows()).map(|i| softmax(lv.row(i))).collect()
    }

    /// `1 - P(NILM)` for every cell of a bag, from the student encoder.
    pub fn positive_scores(&self, cells: &[&CellImage]) -> Vec<f64> {
        if cells.is_empty() {
            return Vec::new();
        }
        let z = self.embed_cells(EncoderRole::Student, cells);
        self.cell_probs(&z).iter().map(|p| 1.0 - p[CellClass::Nilm.id()]).collect()
    }

    pub fn predict_bag(&self, cells: &[CellImage], k: usize) -> Result<BagPrediction> {
        if cells.is_empty() {
            return Err(Error::Empty("bag"));
        }
        let refs: Vec<&CellImage> = cells.iter().collect();
        let z = self.embed_cells(EncoderRole::Student, &refs);
        let cell_scores: Vec<f64> = self.cell_probs(&z).iter().map(|p| 1.0 - p[0]).collect();
        let topk = topk_select(&cell_scores, k)?;
        let zk = gather(&z, &topk);
        let logits = bag_logits(&self.head(), &self.wsi_head, &zk)?;
        Ok(BagPrediction {
            probs: softmax(&logits),
            topk,
            cell_scores,
        })
    }
}

/// Rows of a matrix by index.
pub fn gather(z: &Tensor, index: &[usize]) -> Tensor {
    let d = z.cols();
    let mut data = Vec::with_capacity(index.len() * d);
    for &i in index {
        data.extend_from_slice(z.row(i));
    }
    Tensor::new([index.len(), d], data).unwrap()
}

pub fn config_hash(resolved_config: &str) -> String {
    format!("{:x}", Sha256::digest(resolved_config.as_bytes()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint_version: u32,
    pub taxonomy_version: String,
    pub config_hash: String,
    pub bundle: ModelBundle,
}

impl Checkpoint {
    pub fn new(bundle: ModelBundle, config_hash: String) -> Self {
        Self {
            checkpoint_version: CHECKPOINT_VERSION,
            taxonomy_version: TAXONOMY_VERSION.to_string(),
            config_hash,
            bundle,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let format = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| format(e.to_string()))?;
        if ck.checkpoint_version != CHECKPOINT_VERSION {
            return Err(format(format!("unsupported checkpoint version {}", ck.checkpoint_version)));
        }
        if ck.taxonomy_version != TAXONOMY_VERSION {
            return Err(format(format!(
                "checkpoint taxonomy `{}` does not match `{TAXONOMY_VERSION}`",
                ck.taxonomy_version
            )));
        }
        ck.bundle.config.validate()?;
        Ok(ck)
    }
}
