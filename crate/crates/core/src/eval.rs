//! Slide-level metrics and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::manifest::Split;
use crate::model::ModelBundle;
use crate::synthgen::WsiBag;
use crate::taxonomy::{CellClass, Severity, NUM_CLASSES};
use crate::topk::topk_select;

/// `1 - P(NILM)`.
pub fn binary_score(probs: &[f64]) -> Result<f64> {
    if probs.len() != NUM_CLASSES {
        return Err(Error::Shape(format!("{} class probabilities", probs.len())));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::param("probs", "not a probability distribution"));
    }
    Ok(probs[1..].iter().sum::<f64>().min(1.0))
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::param("labels", "both classes must be present"));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // For each group of tied scores: positives beat all negatives below the
    // group and half of the negatives inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let p = idx[i..j].iter().filter(|&&k| labels[k]).count();
        let n = (j - i) - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAtSens {
    pub target: f64,
    pub achieved_sensitivity: f64,
    pub specificity: f64,
    /// Predict positive when `score >= threshold`.
    pub threshold: f64,
}

/// Best specificity among thresholds reaching `sensitivity >= target`;
/// candidate thresholds are the observed scores, ties go to the highest.
pub fn specificity_at_sensitivity(scores: &[f64], labels: &[bool], target: f64) -> Result<SpecAtSens> {
    let (pos, neg) = check_binary(scores, labels)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::param("target", "must lie in [0, 1]"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Lowering the threshold only raises sensitivity and lowers specificity,
    // so the first threshold (from the top) that reaches the target wins.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let sens = tp as f64 / pos as f64;
        if sens >= target {
            return Ok(SpecAtSens {
                target,
                achieved_sensitivity: sens,
                specificity: (neg - fp) as f64 / neg as f64,
                threshold: t,
            });
        }
    }
    Err(Error::param("target", "sensitivity target unreachable"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// One point per distinct score, from the highest threshold down.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(out)
}

pub type ConfusionMatrix = [[usize; NUM_CLASSES]; NUM_CLASSES];

/// Rows are true classes, columns predictions.
pub fn confusion_matrix(pred: &[CellClass], truth: &[CellClass]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut m = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (p, t) in pred.iter().zip(truth) {
        m[t.id()][p.id()] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1. By default only classes present in the
/// ground truth are averaged; `include_all` averages over every class.
pub fn f1_macro(pred: &[CellClass], truth: &[CellClass], include_all: bool) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let m = confusion_matrix(pred, truth)?;
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..NUM_CLASSES {
        let tp = m[c][c];
        let support: usize = m[c].iter().sum();
        let predicted: usize = (0..NUM_CLASSES).map(|r| m[r][c]).sum();
        if support == 0 && !include_all {
            continue;
        }
        let denom = support + predicted;
        sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Fraction of positive bags whose top-K by `scorer` holds a latent-positive cell.
pub fn topk_recall<'a>(bags: impl IntoIterator<Item = &'a WsiBag>, mut scorer: impl FnMut(&WsiBag) -> Vec<f64>, k: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for bag in bags {
        if !bag.label.is_positive() {
            continue;
        }
        let latent = bag.latent_labels().ok_or(Error::param("bags", "latent labels are required"))?;
        let idx = topk_select(&scorer(bag), k)?;
        total += 1;
        hits += idx.iter().any(|&i| latent[i].is_positive()) as usize;
    }
    if total == 0 {
        return Err(Error::Empty("positive bag set"));
    }
    Ok(hits as f64 / total as f64)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0)
}

/// Most severe per-cell argmax class over `subset` (all cells when `None`).
pub fn max_pooled_prediction(cell_probs: &[Vec<f64>], subset: Option<&[usize]>) -> Result<CellClass> {
    let classes: Vec<CellClass> = match subset {
        Some(idx) => idx.iter().map(|&i| argmax(&cell_probs[i])).collect::<Vec<_>>(),
        None => cell_probs.iter().map(|p| argmax(p)).collect(),
    }
    .into_iter()
    .map(CellClass::from_id)
    .collect::<Result<_>>()?;
    Severity::default().max_of(classes).ok_or(Error::Empty("cell set"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsiPrediction {
    pub wsi_id: String,
    pub domain: String,
    pub label: CellClass,
    pub predicted: CellClass,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub n_wsi: usize,
    pub auc_binary: Option<f64>,
    pub specificity_at_sensitivity: Option<SpecAtSens>,
    pub f1_macro: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub n_wsi: usize,
    pub class_counts: [usize; NUM_CLASSES],
    pub auc_binary: Option<f64>,
    pub specificity_at_sensitivity: Option<SpecAtSens>,
    pub f1_macro: f64,
    pub confusion: ConfusionMatrix,
    pub topk_recall: Option<f64>,
    pub per_domain: BTreeMap<String, DomainReport>,
    pub predictions: Vec<WsiPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub top_k: usize,
    pub sensitivity_target: f64,
    pub f1_include_all: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: 256,
            sensitivity_target: 0.95,
            f1_include_all: false,
        }
    }
}

fn summarize(preds: &[&WsiPrediction], cfg: &EvalConfig) -> Result<DomainReport> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label.is_positive()).collect();
    let both = labels.iter().any(|l| *l) && labels.iter().any(|l| !*l);
    let pc: Vec<CellClass> = preds.iter().map(|p| p.predicted).collect();
    let tc: Vec<CellClass> = preds.iter().map(|p| p.label).collect();
    Ok(DomainReport {
        n_wsi: preds.len(),
        auc_binary: if both { Some(roc_auc(&scores, &labels)?) } else { None },
        specificity_at_sensitivity: if both {
            Some(specificity_at_sensitivity(&scores, &labels, cfg.sensitivity_target)?)
        } else {
            None
        },
        f1_macro: f1_macro(&pc, &tc, cfg.f1_include_all)?,
    })
}

/// Top-K distilled slide inference over one split.
pub fn evaluate(bundle: &ModelBundle, corpus: &Corpus, split: Split, cfg: &EvalConfig) -> Result<MetricsReport> {
    let bags = corpus.split(split);
    if bags.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut predictions = Vec::with_capacity(bags.len());
    let mut hits = 0usize;
    let mut positives_with_latents = 0usize;
    let mut latents_complete = true;
    for bag in &bags {
        let pred = bundle.predict_bag(&bag.instances, cfg.top_k)?;
        if bag.label.is_positive() {
            match bag.latent_labels() {
                Some(lat) => {
                    positives_with_latents += 1;
                    hits += pred.topk.iter().any(|&i| lat[i].is_positive()) as usize;
                }
                None => latents_complete = false,
            }
        }
        predictions.push(WsiPrediction {
            wsi_id: bag.id.clone(),
            domain: bag.domain.clone(),
            label: bag.label,
            predicted: pred.predicted_class(),
            score: binary_score(&pred.probs)?,
        });
    }
    let all: Vec<&WsiPrediction> = predictions.iter().collect();
    let overall = summarize(&all, cfg)?;
    let mut per_domain = BTreeMap::new();
    let domains: std::collections::BTreeSet<&str> = predictions.iter().map(|p| p.domain.as_str()).collect();
    for d in domains {
        let sub: Vec<&WsiPrediction> = predictions.iter().filter(|p| p.domain == d).collect();
        per_domain.insert(d.to_string(), summarize(&sub, cfg)?);
    }
    let mut class_counts = [0usize; NUM_CLASSES];
    for p in &predictions {
        class_counts[p.label.id()] += 1;
    }
    let pc: Vec<CellClass> = predictions.iter().map(|p| p.predicted).collect();
    let tc: Vec<CellClass> = predictions.iter().map(|p| p.label).collect();
    Ok(MetricsReport {
        split,
        n_wsi: predictions.len(),
        class_counts,
        auc_binary: overall.auc_binary,
        specificity_at_sensitivity: overall.specificity_at_sensitivity,
        f1_macro: overall.f1_macro,
        confusion: confusion_matrix(&pc, &tc)?,
        topk_recall: (latents_complete && positives_with_latents > 0).then(|| hits as f64 / positives_with_latents as f64),
        per_domain,
        predictions,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Plain-text rendering of a report.
pub fn render_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "split: {}   slides: {}", r.split, r.n_wsi);
    let _ = writeln!(s, "{:<14}{:>10}", "AUC", opt(r.auc_binary));
    if let Some(sp) = &r.specificity_at_sensitivity {
        let _ = writeln!(
            s,
            "{:<14}{:>10.4}  (sens {:.4} at threshold {:.4})",
            format!("spec@sens{:.0}", sp.target * 100.0),
            sp.specificity,
            sp.achieved_sensitivity,
            sp.threshold
        );
    }
    let _ = writeln!(s, "{:<14}{:>10.4}", "F1-macro", r.f1_macro);
    let _ = writeln!(s, "{:<14}{:>10}", "top-K recall", opt(r.topk_recall));
    let _ = writeln!(s, "\nconfusion (rows = truth)");
    let _ = write!(s, "{:<12}", "");
    for c in CellClass::ALL {
        let _ = write!(s, "{:>12}", c.name());
    }
    let _ = writeln!(s);
    for c in CellClass::ALL {
        let _ = write!(s, "{:<12}", c.name());
        for v in r.confusion[c.id()] {
            let _ = write!(s, "{v:>12}");
        }
        let _ = writeln!(s);
    }
    if !r.per_domain.is_empty() {
        let _ = writeln!(s, "\n{:<10}{:>8}{:>10}{:>14}{:>10}", "domain", "slides", "AUC", "spec@sens", "F1");
        for (d, dr) in &r.per_domain {
            let spec = dr.specificity_at_sensitivity.map(|x| x.specificity);
            let _ = writeln!(s, "{:<10}{:>8}{:>10}{:>14}{:>10.4}", d, dr.n_wsi, opt(dr.auc_binary), opt(spec), dr.f1_macro);
        }
    }
    s
}
