use std::path::Path;
use std::process::Command;

use stride_cli::{
    cmd_eval, cmd_explain, cmd_pretrain_cell, cmd_synth, cmd_train_align, cmd_train_frozen_head, cmd_train_swift, CliError,
    Context, RunConfig, CONFIG_SNAPSHOT, LOG_FILE,
};
use stride_core::Split;

const TINY: &str = r#"
seed = 3
tile_size = 16

[corpus]
cells_per_wsi = 12
positive_density = 0.2
prevalence = [0.5, 0.2, 0.1, 0.1, 0.1]

[corpus.splits]
train = 8
val = 2
test = 4
shifted_test = 4

[model]
channels = [4, 8]
embed_dim = 8
attention_hidden = 8
mlp_hidden = 8

[pretrain]
iterations = 5
batch = 8

[frozen_head]
epochs = 2

[swift]
iterations = 6
cell_batch = 8
wsi_batch = 2
top_k = 4

[coloradv]
iterations = 3
cell_batch = 8
wsi_batch = 2
top_k = 4

[align]
epochs = 2
batch = 8

[eval]
top_k = 4
"#;

fn tiny_ctx(root: &Path) -> Context {
    Context::new(RunConfig::from_sources(Some(TINY), &[]).unwrap(), Some(root.to_path_buf()))
}

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = RunConfig::from_sources(None, &[]).unwrap();
    let back = RunConfig::from_sources(Some(&cfg.to_toml()), &[]).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(cfg.model.tile_size, cfg.corpus.render.tile_size);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(matches!(RunConfig::from_sources(Some("sede = 1"), &[]), Err(CliError::User(_))));
    assert!(matches!(RunConfig::from_sources(Some("[swift]\ntau = 0.3"), &[]), Err(CliError::User(_))));
    assert!(RunConfig::from_sources(None, &["swift.nope=1".into()]).is_err());
}

#[test]
fn overrides_win_over_file_values() {
    let cfg = RunConfig::from_sources(Some(TINY), &["swift.iterations=42".into(), "seed=9".into()]).unwrap();
    assert_eq!(cfg.swift.iterations, 42);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.corpus.seed, 9);
    assert_eq!(cfg.model.tile_size, 16);
    assert_eq!(cfg.corpus.render.tile_size, 16);
}

#[test]
fn invalid_values_are_user_errors() {
    let e = RunConfig::from_sources(None, &["swift.tau_cam=1.5".into()]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(RunConfig::from_sources(None, &["model.tile_size=32".into(), "corpus.render.tile_size=16".into()]).is_err());
}

#[test]
fn synth_twice_gives_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cmd_synth(&tiny_ctx(a.path())).unwrap().join("manifest.json");
    let mb = cmd_synth(&tiny_ctx(b.path())).unwrap().join("manifest.json");
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
    assert!(a.path().join("corpus").join(CONFIG_SNAPSHOT).exists());
}

#[test]
fn missing_prerequisites_name_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_ctx(dir.path());
    match cmd_pretrain_cell(&ctx) {
        Err(CliError::User(m)) => assert!(m.contains("stride synth"), "{m}"),
        other => panic!("{other:?}"),
    }
    cmd_synth(&ctx).unwrap();
    match cmd_eval(&ctx, None, Split::Test) {
        Err(CliError::User(m)) => assert!(m.contains("stride train-swift"), "{m}"),
        other => panic!("{other:?}"),
    }
    match cmd_train_swift(&ctx, false) {
        Err(CliError::User(m)) => assert!(m.contains("stride pretrain-cell"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_ctx(dir.path());
    cmd_synth(&ctx).unwrap();
    cmd_pretrain_cell(&ctx).unwrap();
    cmd_train_frozen_head(&ctx).unwrap();
    let swift = cmd_train_swift(&ctx, true).unwrap();
    assert!(swift.exists());
    let log = std::fs::read_to_string(swift.parent().unwrap().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().next().unwrap().contains("\"L_semi_weak\""));
    for stage in ["pretrain", "frozen", "swift-coloradv"] {
        assert!(dir.path().join(stage).join(CONFIG_SNAPSHOT).exists(), "{stage}");
    }

    cmd_train_align(&ctx, None).unwrap();
    let (eval_dir, report) = cmd_eval(&ctx, None, Split::ShiftedTest).unwrap();
    assert_eq!(report.n_wsi, 4);
    assert_eq!(report.confusion.iter().flatten().sum::<usize>(), 4);
    for f in ["report.json", "report.txt", CONFIG_SNAPSHOT] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }
    let (_, again) = cmd_eval(&ctx, None, Split::ShiftedTest).unwrap();
    assert_eq!(report, again);

    for k in [5, 32] {
        let (path, ex) = cmd_explain(&ctx, None, "test-0000", k).unwrap();
        assert!(path.exists());
        assert_eq!(ex.rois.len(), k.min(12));
        assert!(ex.rois.windows(2).all(|w| w[0].positive_score >= w[1].positive_score));
        // explain defaults to the aligned checkpoint, so descriptions are scored
        assert!(ex.rois.iter().all(|r| r.similarities.len() == 13));
    }
    assert!(cmd_explain(&ctx, None, "nope", 3).is_err());
}

#[test]
fn deterministic_runs_write_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for dir in [a.path(), b.path()] {
        let ctx = tiny_ctx(dir);
        cmd_synth(&ctx).unwrap();
        cmd_pretrain_cell(&ctx).unwrap();
        let ck = cmd_train_swift(&ctx, false).unwrap();
        logs.push(std::fs::read(ck.parent().unwrap().join(LOG_FILE)).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

fn stride(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stride"))
        .args(args)
        .env("STRIDE_OUT", out)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    let out = stride(&["eval", "--config", cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stride train-swift"));

    assert_eq!(stride(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(stride(&["synth", "--set", "swift.tau_cam=2"], dir.path()).status.code(), Some(1));
    assert_eq!(stride(&["--help"], dir.path()).status.code(), Some(0));

    let out = stride(&["synth", "--config", cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("corpus").join("manifest.json").exists());
}
