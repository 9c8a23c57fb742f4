//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stride_autograd::{init, ParamStore, Tensor};
use stride_cli::{
    cmd_eval, cmd_pretrain_cell, cmd_synth, cmd_train_frozen_head, cmd_train_swift, Context, RunConfig, CHECKPOINT_FILE,
    LOG_FILE,
};
use stride_core::align::{alignment_loss, micro_f1, predict_descriptions, select_descriptions, train_align, AlignConfig};
use stride_core::coloradv::{
    adv_perturbation, apply_perturbation, cell_batch_loss, color_grad, color_grad_with, random_direction, ColorSpace, Fallback,
};
use stride_core::eval::{evaluate, max_pooled_prediction, roc_auc, specificity_at_sensitivity};
use stride_core::model::{bag_logits, gradcam_scores, AttentionMil, Checkpoint, EncoderRole, ModelBundle, ModelConfig};
use stride_core::swift::{pretrain_cells, refine_pseudo_labels, train_swift, LabelledPool, PretrainConfig};
use stride_core::synthgen::{generate_corpus, CorpusConfig, RenderSpec, SplitSizes};
use stride_core::topk::topk_select;
use stride_core::{CellClass, CellImage, DescriptionVocabulary, RgbImage, Split, NUM_CLASSES};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Desk-scale run config shared by the end-to-end criteria.
fn desk_config(seed: u64, swift_iterations: usize) -> RunConfig {
    let text = format!(
        r#"
seed = {seed}
tile_size = 32

[corpus]
cells_per_wsi = 48
positive_density = 0.03
prevalence = [0.5, 0.2, 0.1, 0.12, 0.08]

[corpus.splits]
train = 160
val = 0
test = 100
shifted_test = 100

[model]
channels = [8, 16, 32]
embed_dim = 32
attention_hidden = 32
mlp_hidden = 32

[pretrain]
iterations = 200
batch = 32

[frozen_head]
epochs = 30
wsi_batch = 4

[swift]
iterations = {swift_iterations}
cell_batch = 32
wsi_batch = 4
top_k = 8
ema_decay = 0.99

[coloradv]
iterations = 150
cell_batch = 32
wsi_batch = 4
top_k = 8

[eval]
top_k = 8
"#
    );
    RunConfig::from_sources(Some(&text), &[]).expect("desk config is valid")
}

fn rel_err(approx: f64, exact: f64) -> f64 {
    (approx - exact).abs() / exact.abs().max(approx.abs()).max(1e-6)
}

// 1. Grad-CAM weights against central finite differences.
fn gradcam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cfg = ModelConfig {
            tile_size: 8,
            channels: vec![2],
            embed_dim: rng.random_range(3..10),
            attention_hidden: rng.random_range(2..8),
            mlp_hidden: rng.random_range(2..8),
            mlp_layers: 4,
            dropout: 0.1,
        };
        let head = AttentionMil::new(&cfg);
        let params = head.init(&mut rng);
        let k = rng.random_range(1..12);
        let z = init::uniform(&mut rng, &[k, cfg.embed_dim], 1.5);
        let class = rng.random_range(0..NUM_CLASSES);
        let beta = gradcam_scores(&head, &params, &z, class).expect("valid bag");
        for (kk, b) in beta.iter().enumerate() {
            let mut acc = 0.0;
            for d in 0..cfg.embed_dim {
                let mut zp = z.clone();
                zp.row_mut(kk)[d] += h;
                let mut zm = z.clone();
                zm.row_mut(kk)[d] -= h;
                acc += (bag_logits(&head, &params, &zp).unwrap()[class] - bag_logits(&head, &params, &zm).unwrap()[class]) / (2.0 * h);
            }
            worst = worst.max(rel_err(*b, acc / cfg.embed_dim as f64));
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 100 (bag, class) pairs"))
}

// 2. Max-pooled inference over the full bag equals inference over its top-K.
fn topk_equivalence() -> Outcome {
    let vocab = DescriptionVocabulary::builtin();
    let cfg = CorpusConfig {
        render: RenderSpec { tile_size: 8, ..RenderSpec::default() },
        splits: SplitSizes { train: 200, val: 0, test: 0, shifted_test: 0 },
        cells_per_wsi: 60,
        positive_density: 0.1,
        prevalence: [0.3, 0.2, 0.2, 0.2, 0.1],
        seed: 7,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg, &vocab).expect("corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    // K covers the largest lesion count so every positive bag keeps its lesions
    let k = corpus
        .bags()
        .iter()
        .map(|b| b.latent_labels().unwrap().iter().filter(|c| c.is_positive()).count())
        .max()
        .unwrap_or(1)
        .max(8);
    let (mut agree, mut total, mut guaranteed) = (0, 0, 0);
    for bag in corpus.bags() {
        let latent = bag.latent_labels().expect("oracle labels");
        // Oracle-constructed cell posteriors: lesion cells put most mass on their
        // class, NILM cells keep P(NILM) above one half, so every lesion cell
        // outranks every NILM cell by positive score.
        let probs: Vec<Vec<f64>> = latent
            .iter()
            .map(|c| {
                let mut p = vec![0.0; NUM_CLASSES];
                if c.is_positive() {
                    let main = rng.random_range(0.55..0.95);
                    p[c.id()] = main;
                    let rest: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = (0..NUM_CLASSES).filter(|&j| j != c.id()).map(|j| rest[j]).sum();
                    for j in (0..NUM_CLASSES).filter(|&j| j != c.id()) {
                        p[j] = (1.0 - main) * rest[j] / s * 0.8;
                    }
                    p[0] += 1.0 - p.iter().sum::<f64>();
                } else {
                    p[0] = rng.random_range(0.6..1.0);
                    let rest: Vec<f64> = (1..NUM_CLASSES).map(|_| rng.random_range(0.0..1.0)).collect();
                    let s: f64 = rest.iter().sum();
                    for j in 1..NUM_CLASSES {
                        p[j] = (1.0 - p[0]) * rest[j - 1] / s;
                    }
                }
                p
            })
            .collect();
        let scores: Vec<f64> = probs.iter().map(|p| 1.0 - p[0]).collect();
        let top = topk_select(&scores, k).expect("scores");
        let n_pos = latent.iter().filter(|c| c.is_positive()).count();
        guaranteed += (top.iter().filter(|&&i| latent[i].is_positive()).count() == n_pos) as usize;
        total += 1;
        let full = max_pooled_prediction(&probs, None).unwrap();
        let sub = max_pooled_prediction(&probs, Some(&top)).unwrap();
        agree += (full == sub) as usize;
    }
    outcome(
        agree == total && guaranteed == total,
        format!("{agree}/{total} bags agree; top-{k} keeps every lesion cell: {}", guaranteed == total),
    )
}

// 3. Pseudo-label refinement truth table.
fn refine_truth_table() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = 0;
    let mut branches = [0usize; 3];
    for _ in 0..10_000 {
        let tau1 = rng.random_range(0.01..0.99);
        let tau2 = rng.random_range(0.01..0.99);
        let c = rng.random_range(0..NUM_CLASSES);
        // mix continuous draws with values sitting exactly on the thresholds
        let beta = match rng.random_range(0..4) {
            0 => tau1,
            _ => rng.random_range(0.0..1.0),
        };
        let mut p: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.0..1.0f64).powi(rng.random_range(1..8))).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let out = refine_pseudo_labels(&[beta], std::slice::from_ref(&p), c, tau1, tau2).expect("valid inputs");
        let top = (0..NUM_CLASSES).fold(0, |b, j| if p[j] > p[b] { j } else { b });
        let (m, y, cam) = (out.mask[0], out.y_refine[0], out.cam_branch[0]);
        let ok = if beta > tau1 {
            branches[0] += 1;
            m && y == c && cam
        } else if p[top] > tau2 {
            branches[1] += 1;
            m && y == top && !cam
        } else {
            branches[2] += 1;
            !m && !cam
        };
        violations += (!ok) as usize;
    }
    outcome(
        violations == 0,
        format!("{violations} violations in 10000 samples (cam {}, confidence {}, masked {})", branches[0], branches[1], branches[2]),
    )
}

fn noisy_images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<RgbImage> {
    (0..n)
        .map(|_| RgbImage::new(size, (0..size * size * 3).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap())
        .collect()
}

fn pretrained_bundle(seed: u64) -> (ModelBundle, stride_core::Corpus) {
    let cfg = desk_config(seed, 0);
    let vocab = DescriptionVocabulary::builtin();
    let corpus_cfg = CorpusConfig { annotation_budget: 0.5, positive_density: 0.125, ..cfg.corpus.clone() };
    let corpus = generate_corpus(&corpus_cfg, &vocab).expect("corpus");
    let mut bundle = ModelBundle::new(cfg.model.clone(), seed).unwrap();
    let pre = PretrainConfig { iterations: 400, ..cfg.pretrain.clone() };
    pretrain_cells(&mut bundle, &corpus, &pre, &cfg.swift.strong_aug, true, seed).unwrap();
    (bundle, corpus)
}

// 4. Adversarial colour shift is the worst case in the linear regime and beats
// random shifts of equal norm on a trained network.
fn coloradv_optimality(trained: &ModelBundle, corpus: &stride_core::Corpus) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let rho = 0.1;
    // linear loss in the pixels, hence in an RGB shift away from the clamps
    let images = noisy_images(&mut rng, 4, 6);
    let w: Vec<Vec<f64>> = images.iter().map(|i| (0..i.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let loss = |imgs: &[RgbImage]| -> f64 { imgs.iter().zip(&w).map(|(i, wi)| i.data().iter().zip(wi).map(|(a, b)| a * b).sum::<f64>()).sum() };
    let grads = color_grad_with(&images, ColorSpace::Rgb, |_| w.clone()).unwrap();
    let base = loss(&images);
    let mut worst_gap: f64 = 0.0;
    let mut exceed: f64 = f64::NEG_INFINITY;
    for (i, g) in grads.iter().enumerate() {
        let (r, _) = adv_perturbation(*g, rho, Fallback::RandomDirection, &mut rng);
        let mut shifted = images.clone();
        shifted[i] = apply_perturbation(&images[i], r, ColorSpace::Rgb);
        let adv = loss(&shifted);
        let sup = base + rho * g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_gap = worst_gap.max((adv - sup).abs());
        let mut best_random = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let rr = random_direction(rho, &mut rng);
            let mut s = images.clone();
            s[i] = apply_perturbation(&images[i], rr, ColorSpace::Rgb);
            best_random = best_random.max(loss(&s));
        }
        exceed = exceed.max(best_random - adv);
    }
    let linear_ok = worst_gap < 1e-6 && exceed < 1e-6;

    let pool = LabelledPool::from_corpus(corpus);
    let mut wins = 0;
    for b in 0..100 {
        let batch = pool.sample(32, true, &mut rng);
        let imgs: Vec<RgbImage> = batch.iter().map(|(c, _)| c.rgb()).collect();
        let labels: Vec<CellClass> = batch.iter().map(|(_, l)| *l).collect();
        let space = if b % 2 == 0 { ColorSpace::Rgb } else { ColorSpace::Hsv };
        let g = color_grad(trained, &imgs, &labels, &[], space).unwrap();
        let adv: Vec<RgbImage> = imgs
            .iter()
            .zip(&g)
            .map(|(im, gi)| apply_perturbation(im, adv_perturbation(*gi, rho, Fallback::RandomDirection, &mut rng).0, space))
            .collect();
        let rnd: Vec<RgbImage> = imgs.iter().map(|im| apply_perturbation(im, random_direction(rho, &mut rng), space)).collect();
        wins += (cell_batch_loss(trained, &adv, &labels) > cell_batch_loss(trained, &rnd, &labels)) as usize;
    }
    outcome(
        linear_ok && wins >= 90,
        format!(
            "linear: |adv - analytic max| {worst_gap:.1e}, best random exceeds adv by {exceed:.1e}; trained: adversarial wins {wins}/100"
        ),
    )
}

// 5. Metric oracles.
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut auc_err, mut spec_mismatch): (f64, usize) = (0.0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..50);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        l[0] = true;
        l[1] = false;
        let mut wins = 0.0;
        let (mut np, mut nn) = (0.0, 0.0);
        for i in 0..n {
            if l[i] {
                np += 1.0;
            } else {
                nn += 1.0;
            }
        }
        for i in (0..n).filter(|&i| l[i]) {
            for j in (0..n).filter(|&j| !l[j]) {
                wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
        auc_err = auc_err.max((roc_auc(&s, &l).unwrap() - wins / (np * nn)).abs());

        let target = 0.95;
        let got = specificity_at_sensitivity(&s, &l, target).unwrap();
        let mut best: Option<(f64, f64)> = None;
        for &t in &s {
            let tp = (0..n).filter(|&i| l[i] && s[i] >= t).count() as f64;
            let tn = (0..n).filter(|&i| !l[i] && s[i] < t).count() as f64;
            if tp / np >= target {
                let sp = tn / nn;
                if best.is_none_or(|(bs, bt)| sp > bs || (sp == bs && t > bt)) {
                    best = Some((sp, t));
                }
            }
        }
        let (bs, bt) = best.expect("a zero threshold always reaches the target");
        spec_mismatch += (got.specificity != bs || got.threshold != bt) as usize;
    }
    outcome(
        auc_err <= 1e-12 && spec_mismatch == 0,
        format!("AUC max deviation {auc_err:.1e}; spec@sens mismatches {spec_mismatch}/1000"),
    )
}

struct TrendRun {
    frozen_shifted_auc: f64,
    swift_shifted_auc: f64,
    swift_shifted_spec: f64,
    adv_shifted_spec: f64,
    adv_test_auc: f64,
    matched_shifted_spec: f64,
}

fn trend_seed(seed: u64, root: &Path) -> TrendRun {
    let cfg = desk_config(seed, 300);
    let ctx = Context::new(cfg.clone(), Some(root.to_path_buf()));
    cmd_synth(&ctx).unwrap();
    cmd_pretrain_cell(&ctx).unwrap();
    let frozen = cmd_train_frozen_head(&ctx).unwrap();
    let swift = cmd_train_swift(&ctx, false).unwrap();
    let adv = cmd_train_swift(&ctx, true).unwrap();
    let shifted = |ck: &Path| cmd_eval(&ctx, Some(ck), Split::ShiftedTest).unwrap().1;
    let (f, s, a) = (shifted(&frozen), shifted(&swift), shifted(&adv));
    let at = cmd_eval(&ctx, Some(&adv), Split::Test).unwrap().1;

    // same total number of updates, no adversarial term
    let corpus = stride_cli::load_corpus(&ctx).unwrap();
    let start = Checkpoint::load(&ctx.layout.pretrain().join(CHECKPOINT_FILE)).unwrap().bundle;
    let long = stride_core::swift::SwiftConfig { iterations: cfg.swift.iterations + cfg.coloradv.iterations, ..cfg.swift.clone() };
    let (matched, _) = train_swift(start, &corpus, &long, seed, |_| {}).unwrap();
    let m = evaluate(&matched, &corpus, Split::ShiftedTest, &cfg.eval).unwrap();
    let spec = |r: &stride_core::eval::MetricsReport| r.specificity_at_sensitivity.unwrap().specificity;
    TrendRun {
        frozen_shifted_auc: f.auc_binary.unwrap(),
        swift_shifted_auc: s.auc_binary.unwrap(),
        swift_shifted_spec: spec(&s),
        adv_shifted_spec: spec(&a),
        adv_test_auc: at.auc_binary.unwrap(),
        matched_shifted_spec: spec(&m),
    }
}

// 6. End-to-end synthetic trend over three seeds.
fn end_to_end_trend() -> Outcome {
    let runs: Vec<TrendRun> = (0..3)
        .map(|seed| {
            let dir = tempfile::tempdir().unwrap();
            let r = trend_seed(seed, dir.path());
            println!(
                "    seed {seed}: shifted AUC frozen {:.4} swift {:.4}; shifted spec@95 swift {:.4} +coloradv {:.4} (iteration-matched swift {:.4}); in-domain AUC {:.4}",
                r.frozen_shifted_auc, r.swift_shifted_auc, r.swift_shifted_spec, r.adv_shifted_spec, r.matched_shifted_spec, r.adv_test_auc
            );
            r
        })
        .collect();
    let mean = |f: &dyn Fn(&TrendRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let auc_gain = mean(&|r| r.swift_shifted_auc - r.frozen_shifted_auc);
    let spec_gain = mean(&|r| r.adv_shifted_spec - r.swift_shifted_spec);
    let min_in_domain = runs.iter().map(|r| r.adv_test_auc).fold(f64::INFINITY, f64::min);
    outcome(
        auc_gain >= 0.05 && spec_gain >= 0.10 && min_in_domain >= 0.95,
        format!(
            "shifted AUC gain over frozen {:+.1} pts; shifted spec@95 gain from ColorAdv {:+.1} pts; min in-domain AUC {min_in_domain:.4}",
            100.0 * auc_gain,
            100.0 * spec_gain
        ),
    )
}

// 7. Alignment loss, selection properties, freeze contract and held-out F1.
fn alignment(trained: &ModelBundle, corpus: &stride_core::Corpus) -> Outcome {
    let one = Tensor::new([1, 2], vec![0.6, 0.8]).unwrap();
    let neg = Tensor::new([1, 2], vec![-0.6, -0.8]).unwrap();
    let l1 = alignment_loss(&one, &one, &[vec![1]]).unwrap();
    let l2 = alignment_loss(&one, &neg, &[vec![0]]).unwrap();
    let hand_ok = (l1 - 0.62652).abs() < 1e-4 && (l2 - 0.62652).abs() < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut prop_violations = 0;
    for _ in 0..10_000 {
        let d = rng.random_range(2..10);
        let n = rng.random_range(1..15);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = init::uniform(&mut rng, &[n, d], 1.0);
        let (a, b) = (rng.random_range(-0.99..0.99f64), rng.random_range(-0.99..0.99f64));
        let (lo, hi) = (a.min(b), a.max(b));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let s_lo = select_descriptions(&v, &t, lo).unwrap();
        let s_hi = select_descriptions(&v, &t, hi).unwrap();
        prop_violations += (!s_hi.iter().all(|i| s_lo.contains(i))) as usize;
        prop_violations += (select_descriptions(&scaled, &t, lo).unwrap() != s_lo) as usize;
    }

    let vocab = DescriptionVocabulary::builtin();
    let cfg = AlignConfig { epochs: 30, lr: 1e-3, ..AlignConfig::default() };
    let before: ParamStore = trained.student.clone();
    let held: Vec<&CellImage> = {
        let test: Vec<&CellImage> = corpus.split(Split::Test).into_iter().flat_map(|b| b.instances.iter()).collect();
        let pos: Vec<&CellImage> = test.iter().copied().filter(|c| c.latent_label.is_some_and(|l| l.is_positive())).collect();
        let neg = test.iter().copied().filter(|c| c.latent_label == Some(CellClass::Nilm)).take(pos.len());
        pos.iter().copied().chain(neg).collect()
    };
    let z_before = trained.embed_cells(EncoderRole::Student, &held);
    let (model, _) = train_align(trained, corpus, &vocab, &cfg, 7).unwrap();
    let frozen = trained.student == before && trained.embed_cells(EncoderRole::Student, &held).data() == z_before.data();
    let pred = predict_descriptions(&model, &vocab, &z_before, cfg.lambda).unwrap();
    let truth: Vec<Vec<u8>> = held.iter().map(|c| c.latent_descriptions.clone().unwrap()).collect();
    let f1 = micro_f1(&pred, &truth).unwrap();
    outcome(
        hand_ok && prop_violations == 0 && frozen && f1 >= 0.8,
        format!(
            "hand cases {l1:.5}/{l2:.5}; {prop_violations} property violations in 10000 draws; encoder unchanged: {frozen}; held-out micro-F1 {f1:.4} on {} cells",
            held.len()
        ),
    )
}

// 8. Two deterministic training runs write the same bytes.
fn reproducibility() -> Outcome {
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let ctx = Context::new(desk_config(11, 120), Some(dir.path().to_path_buf()));
        cmd_synth(&ctx).unwrap();
        cmd_pretrain_cell(&ctx).unwrap();
        let ck = cmd_train_swift(&ctx, false).unwrap();
        logs.push(std::fs::read(ck.parent().unwrap().join(LOG_FILE)).unwrap());
        checkpoints.push(std::fs::read(ck).unwrap());
    }
    let same = logs[0] == logs[1];
    outcome(
        same && !logs[0].is_empty(),
        format!("training logs identical: {same} ({} bytes); checkpoints identical: {}", logs[0].len(), checkpoints[0] == checkpoints[1]),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter other than ours skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, Duration, Duration)> = Vec::new();
    let mut run = |n: usize, name: &'static str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let pass = o.pass && el <= limit;
        println!(
            "{} [{n}] {name}: {} ({:.1}s, limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64(),
            limit.as_secs()
        );
        results.push((n, name, o, el, limit));
    };
    let mins = |m: u64| Duration::from_secs(60 * m);

    run(1, "grad-cam finite differences", Duration::from_secs(30), &mut gradcam_oracle);
    run(2, "top-K max-pooling equivalence", mins(1), &mut topk_equivalence);
    run(3, "pseudo-label truth table", Duration::from_secs(10), &mut refine_truth_table);
    let (trained, corpus) = pretrained_bundle(0);
    run(4, "colour-adversarial optimality", mins(2), &mut || coloradv_optimality(&trained, &corpus));
    run(5, "metric oracles", mins(1), &mut metric_oracles);
    run(6, "end-to-end synthetic trend", mins(180), &mut end_to_end_trend);
    run(7, "description alignment", mins(10), &mut || alignment(&trained, &corpus));
    run(8, "deterministic training logs", mins(10), &mut reproducibility);

    let failed: Vec<usize> = results.iter().filter(|r| !(r.2.pass && r.3 <= r.4)).map(|r| r.0).collect();
    println!(
        "\n{}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
