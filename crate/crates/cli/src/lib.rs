//! Pipeline commands behind the `stride` binary. Every command reads the
//! resolved [`RunConfig`] and writes into a fixed directory under the output
//! root, next to a snapshot of that config.

pub mod config;
pub mod error;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stride_core::align::{description_sims, select_descriptions, train_align};
use stride_core::coloradv::train_coloradv;
use stride_core::eval::{evaluate, render_table, roc_curve, MetricsReport};
use stride_core::model::{config_hash, Checkpoint, EncoderRole, ModelBundle};
use stride_core::swift::{pretrain_cells, train_frozen_head, train_swift, SwiftLogRecord};
use stride_core::synthgen::generate_corpus;
use stride_core::vocab::VocabularyFile;
use stride_core::{CellClass, CellImage, Corpus, DescriptionVocabulary, Split};

pub use config::RunConfig;
pub use error::CliError;

pub type CliResult<T> = Result<T, CliError>;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_INFO: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const VOCAB_FILE: &str = "vocabulary.json";

/// Where each command reads and writes.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn frozen(&self) -> PathBuf {
        self.root.join("frozen")
    }
    pub fn swift(&self, coloradv: bool) -> PathBuf {
        self.root.join(if coloradv { "swift-coloradv" } else { "swift" })
    }
    pub fn align(&self) -> PathBuf {
        self.root.join("align")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn explain(&self) -> PathBuf {
        self.root.join("explain")
    }
}

pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Context {
    /// `out` wins over the config's `output_dir`; `runs` is the last resort.
    pub fn new(config: RunConfig, out: Option<PathBuf>) -> Self {
        let root = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
        Self {
            config,
            layout: Layout { root },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RunInfo<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
}

fn prepare_dir(ctx: &Context, dir: &Path, command: &str) -> CliResult<String> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let text = ctx.config.to_toml();
    let hash = config_hash(&text);
    fs::write(dir.join(CONFIG_SNAPSHOT), &text)?;
    let info = RunInfo {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: ctx.config.seed,
        config_hash: hash.clone(),
    };
    fs::write(dir.join(RUN_INFO), serde_json::to_string_pretty(&info).expect("run info serializes"))?;
    Ok(hash)
}

/// Line-per-record log; wall-clock fields only outside deterministic mode.
struct JsonlLog {
    file: fs::File,
    start: Option<Instant>,
}

impl JsonlLog {
    fn create(path: &Path, deterministic: bool) -> CliResult<Self> {
        Ok(Self {
            file: fs::File::create(path)?,
            start: (!deterministic).then(Instant::now),
        })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        let mut v = serde_json::to_value(record).expect("log record serializes");
        if let (Some(start), Some(obj)) = (self.start, v.as_object_mut()) {
            obj.insert("elapsed_ms".into(), (start.elapsed().as_millis() as u64).into());
        }
        writeln!(self.file, "{v}")?;
        Ok(())
    }
}

fn save_checkpoint(bundle: ModelBundle, hash: String, dir: &Path) -> CliResult<PathBuf> {
    let path = dir.join(CHECKPOINT_FILE);
    Checkpoint::new(bundle, hash).save(&path)?;
    Ok(path)
}

pub fn load_corpus(ctx: &Context) -> CliResult<Corpus> {
    let dir = ctx.layout.corpus();
    if !dir.join(stride_core::manifest::MANIFEST_FILE).exists() {
        return Err(CliError::missing("corpus", &dir, "synth"));
    }
    let corpus = Corpus::load(&dir)?;
    if corpus.tile_size() != ctx.config.model.tile_size {
        return Err(CliError::user(format!(
            "corpus tiles are {}px but the model expects {}px; rerun `stride synth` with this config",
            corpus.tile_size(),
            ctx.config.model.tile_size
        )));
    }
    Ok(corpus)
}

pub fn load_vocab(ctx: &Context) -> CliResult<DescriptionVocabulary> {
    let path = ctx.layout.corpus().join(VOCAB_FILE);
    if path.exists() {
        Ok(DescriptionVocabulary::load(&path)?)
    } else {
        Ok(DescriptionVocabulary::builtin())
    }
}

fn load_checkpoint(path: &Path, command: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::missing("checkpoint", path, command));
    }
    Ok(Checkpoint::load(path)?)
}

/// First existing checkpoint among the given stage directories.
fn default_checkpoint(dirs: &[PathBuf], command: &str) -> CliResult<PathBuf> {
    dirs.iter()
        .map(|d| d.join(CHECKPOINT_FILE))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::missing("checkpoint", &dirs[dirs.len() - 1].join(CHECKPOINT_FILE), command))
}

pub fn cmd_synth(ctx: &Context) -> CliResult<PathBuf> {
    let dir = ctx.layout.corpus();
    prepare_dir(ctx, &dir, "synth")?;
    let vocab = DescriptionVocabulary::builtin();
    let corpus = generate_corpus(&ctx.config.corpus, &vocab)?;
    corpus.write(&dir)?;
    let vf: VocabularyFile = vocab.to_file();
    fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&vf).expect("vocabulary serializes"))?;
    Ok(dir)
}

#[derive(Serialize)]
struct LossRecord {
    iter: usize,
    loss: f64,
}

pub fn cmd_pretrain_cell(ctx: &Context) -> CliResult<PathBuf> {
    let corpus = load_corpus(ctx)?;
    let cfg = &ctx.config;
    let dir = ctx.layout.pretrain();
    let hash = prepare_dir(ctx, &dir, "pretrain-cell")?;
    let mut bundle = ModelBundle::new(cfg.model.clone(), cfg.seed)?;
    let losses = pretrain_cells(&mut bundle, &corpus, &cfg.pretrain, &cfg.swift.strong_aug, cfg.swift.class_balanced, cfg.seed)?;
    let mut log = JsonlLog::create(&dir.join(LOG_FILE), cfg.deterministic)?;
    for (iter, &loss) in losses.iter().enumerate() {
        log.write(&LossRecord { iter, loss })?;
    }
    save_checkpoint(bundle, hash, &dir)
}

/// Baseline: pretrained encoder kept frozen, only the slide head trained.
pub fn cmd_train_frozen_head(ctx: &Context) -> CliResult<PathBuf> {
    let corpus = load_corpus(ctx)?;
    let cfg = &ctx.config;
    let mut bundle = load_checkpoint(&ctx.layout.pretrain().join(CHECKPOINT_FILE), "pretrain-cell")?.bundle;
    let dir = ctx.layout.frozen();
    let hash = prepare_dir(ctx, &dir, "train-frozen-head")?;
    let losses = train_frozen_head(&mut bundle, &corpus, &cfg.frozen_head, cfg.swift.top_k, cfg.seed)?;
    let mut log = JsonlLog::create(&dir.join(LOG_FILE), cfg.deterministic)?;
    for (iter, &loss) in losses.iter().enumerate() {
        log.write(&LossRecord { iter, loss })?;
    }
    save_checkpoint(bundle, hash, &dir)
}

#[derive(Serialize)]
struct ColorAdvRecord {
    iter: usize,
    clean: f64,
    adversarial: f64,
    space: stride_core::coloradv::ColorSpace,
    fallbacks: usize,
}

/// Joint training, optionally followed by colour-adversarial fine-tuning.
pub fn cmd_train_swift(ctx: &Context, coloradv: bool) -> CliResult<PathBuf> {
    let corpus = load_corpus(ctx)?;
    let cfg = &ctx.config;
    let bundle = if cfg.swift.warm_start {
        load_checkpoint(&ctx.layout.pretrain().join(CHECKPOINT_FILE), "pretrain-cell")?.bundle
    } else {
        ModelBundle::new(cfg.model.clone(), cfg.seed)?
    };
    if bundle.config != cfg.model {
        return Err(CliError::user("pretrained checkpoint was built with a different model config; rerun `stride pretrain-cell`"));
    }
    let dir = ctx.layout.swift(coloradv);
    let hash = prepare_dir(ctx, &dir, if coloradv { "train-swift --coloradv" } else { "train-swift" })?;
    let mut log = JsonlLog::create(&dir.join(LOG_FILE), cfg.deterministic)?;
    let mut log_err = None;
    let (mut bundle, _) = train_swift(bundle, &corpus, &cfg.swift, cfg.seed, |r: &SwiftLogRecord| {
        if let Err(e) = log.write(r) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    if coloradv {
        let mut adv_log = JsonlLog::create(&dir.join("coloradv.jsonl"), cfg.deterministic)?;
        let mut log_err = None;
        bundle = train_coloradv(bundle, &corpus, &cfg.coloradv, cfg.seed.wrapping_add(1), |iter, l| {
            let rec = ColorAdvRecord {
                iter,
                clean: l.clean,
                adversarial: l.adversarial,
                space: l.space,
                fallbacks: l.fallbacks,
            };
            if let Err(e) = adv_log.write(&rec) {
                log_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_err {
            return Err(e);
        }
    }
    save_checkpoint(bundle, hash, &dir)
}

/// Trains the description aligner on top of a slide checkpoint.
pub fn cmd_train_align(ctx: &Context, checkpoint: Option<&Path>) -> CliResult<PathBuf> {
    let corpus = load_corpus(ctx)?;
    let vocab = load_vocab(ctx)?;
    let cfg = &ctx.config;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(&[ctx.layout.swift(true), ctx.layout.swift(false)], "train-swift")?,
    };
    let mut bundle = load_checkpoint(&path, "train-swift")?.bundle;
    let dir = ctx.layout.align();
    let hash = prepare_dir(ctx, &dir, "train-align")?;
    let (model, losses) = train_align(&bundle, &corpus, &vocab, &cfg.align, cfg.seed)?;
    let mut log = JsonlLog::create(&dir.join(LOG_FILE), cfg.deterministic)?;
    for (iter, &loss) in losses.iter().enumerate() {
        log.write(&LossRecord { iter, loss })?;
    }
    bundle.align = Some(model);
    save_checkpoint(bundle, hash, &dir)
}

fn stage_name(checkpoint: &Path) -> String {
    checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Evaluates one split; writes JSON, a text table and ROC points.
pub fn cmd_eval(ctx: &Context, checkpoint: Option<&Path>, split: Split) -> CliResult<(PathBuf, MetricsReport)> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(&[ctx.layout.swift(true), ctx.layout.swift(false)], "train-swift")?,
    };
    let ck = load_checkpoint(&path, "train-swift")?;
    let corpus = load_corpus(ctx)?;
    let report = evaluate(&ck.bundle, &corpus, split, &ctx.config.eval)?;
    let dir = ctx.layout.eval().join(format!("{}-{}", stage_name(&path), split));
    prepare_dir(ctx, &dir, "eval")?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    fs::write(dir.join("report.txt"), render_table(&report))?;
    let scores: Vec<f64> = report.predictions.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = report.predictions.iter().map(|p| p.label.is_positive()).collect();
    if let Ok(points) = roc_curve(&scores, &labels) {
        let mut csv = String::from("threshold,tpr,fpr\n");
        for p in points {
            csv.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.fpr));
        }
        fs::write(dir.join("roc.csv"), csv)?;
    }
    Ok((dir, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub cell_index: usize,
    pub tile: String,
    pub positive_score: f64,
    pub predicted_class: CellClass,
    pub class_probs: Vec<f64>,
    pub descriptions: Vec<String>,
    /// Cosine similarity to every vocabulary entry, in vocabulary order.
    pub similarities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub wsi_id: String,
    pub split: Split,
    pub label: CellClass,
    pub predicted: CellClass,
    pub slide_probs: Vec<f64>,
    pub rois: Vec<RoiRecord>,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0)
}

/// The `topk` most suspicious cells of one slide, with descriptions when
/// the checkpoint carries an aligner.
pub fn cmd_explain(ctx: &Context, checkpoint: Option<&Path>, wsi_id: &str, topk: usize) -> CliResult<(PathBuf, Explanation)> {
    if topk == 0 {
        return Err(CliError::user("--topk must be at least 1"));
    }
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(
            &[ctx.layout.align(), ctx.layout.swift(true), ctx.layout.swift(false)],
            "train-swift",
        )?,
    };
    let bundle = load_checkpoint(&path, "train-swift")?.bundle;
    let corpus = load_corpus(ctx)?;
    let vocab = load_vocab(ctx)?;
    let bag = corpus
        .bags()
        .iter()
        .find(|b| b.id == wsi_id)
        .ok_or_else(|| CliError::user(format!("no slide `{wsi_id}` in the corpus")))?;
    let pred = bundle.predict_bag(&bag.instances, ctx.config.eval.top_k)?;
    let refs: Vec<&CellImage> = bag.instances.iter().collect();
    let z = bundle.embed_cells(EncoderRole::Student, &refs);
    let probs = bundle.cell_probs(&z);
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by(|&a, &b| (1.0 - probs[b][0]).total_cmp(&(1.0 - probs[a][0])).then(a.cmp(&b)));
    order.truncate(topk);
    let text = bundle.align.as_ref().map(|m| m.encode_descriptions(&vocab)).transpose()?;
    let lambda = bundle.align.as_ref().map_or(ctx.config.align.lambda, |m| m.config.lambda);
    let mut rois = Vec::with_capacity(order.len());
    for &i in &order {
        let (descriptions, similarities) = match (&bundle.align, &text) {
            (Some(m), Some(t)) => {
                let v = m.image_features(&stride_core::model::gather(&z, &[i]));
                let sims = description_sims(v.row(0), t)?;
                let sel = select_descriptions(v.row(0), t, lambda)?;
                (sel.iter().map(|&j| vocab.entries()[j].clone()).collect(), sims)
            }
            _ => (Vec::new(), Vec::new()),
        };
        rois.push(RoiRecord {
            cell_index: i,
            tile: Corpus::tile_path(&bag.id, i),
            positive_score: 1.0 - probs[i][0],
            predicted_class: CellClass::from_id(argmax(&probs[i]))?,
            class_probs: probs[i].clone(),
            descriptions,
            similarities,
        });
    }
    let explanation = Explanation {
        wsi_id: bag.id.clone(),
        split: bag.split,
        label: bag.label,
        predicted: pred.predicted_class(),
        slide_probs: pred.probs,
        rois,
    };
    let dir = ctx.layout.explain();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_SNAPSHOT), ctx.config.to_toml())?;
    let out = dir.join(format!("{wsi_id}.json"));
    fs::write(&out, serde_json::to_string_pretty(&explanation).expect("explanation serializes"))?;
    Ok((out, explanation))
}
