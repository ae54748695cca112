use std::path::Path;

use segalign_core::alignment::FrozenTextEncoder;
use segalign_core::corpus::{generate, Archive, GenConfig};
use segalign_core::eval::ExtractionPoint;
use segalign_core::trainer::{
    dry_losses, fit, fit_twin, Ablation, AudioVisualModel, Checkpoint, EpochRecord, Pipeline, StepMetrics, TrainConfig,
};
use segalign_core::Error;

fn small_corpus(seed: u64) -> Archive {
    let cfg = GenConfig {
        num_train_images: 32,
        num_test_images: 8,
        simi_pairs: 30,
        vocab_size: 48,
        ..GenConfig::default()
    };
    generate(&cfg, seed).unwrap().0
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 2;
    cfg.nfc_warmup_steps = 3;
    cfg.n_neg = 16;
    cfg.n_hard_max = 8;
    cfg.kmeans_k = 4;
    cfg
}

fn lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn fit_writes_the_run_directory() {
    let archive = small_corpus(1);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&cfg, &archive, dir.path(), None).unwrap();

    let steps_per_epoch = 160usize.div_ceil(cfg.batch_size);
    let metrics: Vec<StepMetrics> = lines(&dir.path().join("metrics.jsonl"));
    assert_eq!(metrics.len(), 2 * steps_per_epoch);
    assert_eq!(metrics.last().unwrap().step, 2 * steps_per_epoch - 1);
    let epochs: Vec<EpochRecord> = lines(&dir.path().join("epochs.jsonl"));
    assert_eq!(epochs, out.epochs);

    let resolved: TrainConfig = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved, cfg);
    let ck = Checkpoint::read(out.last_checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!((ck.meta.epoch, ck.meta.step), (2, 2 * steps_per_epoch));
    assert_eq!(ck.meta.config, cfg);
    assert!(dir.path().join("report.json").exists() && dir.path().join("report.txt").exists());

    let back = Pipeline::from_checkpoint(&ck, &archive).unwrap();
    let test = back.retrieval(&archive, segalign_core::corpus::Split::Test, 0).unwrap();
    assert_eq!(test, out.test);
}

#[test]
fn metric_lines_have_the_documented_keys() {
    let archive = small_corpus(2);
    let mut cfg = small_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    fit(&cfg, &archive, dir.path(), None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["epoch", "loss_aux", "loss_nfc", "loss_reg", "loss_ret", "lr", "step"]);
}

#[test]
fn warmup_steps_are_next_frame_only() {
    let archive = small_corpus(3);
    let cfg = small_config();
    let m = dry_losses(&cfg, &archive, 12).unwrap();
    for s in &m {
        if s.epoch == 1 && s.step < 3 {
            assert!(s.loss_nfc.is_some() && s.loss_ret.is_none(), "{s:?}");
        } else if s.epoch == 1 {
            assert!(s.loss_nfc.is_some() && s.loss_ret.is_some(), "{s:?}");
        } else {
            assert!(s.loss_nfc.is_none() && s.loss_ret.is_some(), "{s:?}");
        }
    }
    assert!(m.iter().any(|s| s.epoch == 2));
}

#[test]
fn regularized_head_at_zero_lambda_matches_direct() {
    let archive = small_corpus(4);
    let cfg = small_config();
    let direct = dry_losses(&cfg, &archive, 14).unwrap();
    let reg = dry_losses(&cfg.with_overrides(&["head=regularized".into(), "lambda=0".into()]).unwrap(), &archive, 14).unwrap();
    for (d, r) in direct.iter().zip(&reg) {
        // the logged regularizer is unweighted; at zero weight it must not
        // change any update
        assert_eq!((d.loss_nfc, d.loss_ret), (r.loss_nfc, r.loss_ret));
    }
    let half = dry_losses(&cfg.with_overrides(&["head=regularized".into(), "lambda=0.5".into()]).unwrap(), &archive, 14).unwrap();
    assert!(half.iter().any(|s| s.loss_reg.is_some_and(|v| v > 0.0)));
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let archive = small_corpus(5);
    let cfg = small_config();
    let straight = tempfile::tempdir().unwrap();
    fit(&cfg, &archive, straight.path(), None).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.epochs = 1;
    let o = fit(&first, &archive, split.path(), None).unwrap();
    fit(&cfg, &archive, split.path(), o.last_checkpoint.as_deref()).unwrap();

    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(straight.path(), "checkpoints/epoch_002.ckpt"),
        read(split.path(), "checkpoints/epoch_002.ckpt")
    );
    assert_eq!(read(straight.path(), "metrics.jsonl"), read(split.path(), "metrics.jsonl"));
    assert_eq!(read(straight.path(), "report.json"), read(split.path(), "report.json"));
}

#[test]
fn resume_rejects_a_different_configuration() {
    let archive = small_corpus(6);
    let mut cfg = small_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let o = fit(&cfg, &archive, dir.path(), None).unwrap();
    let mut other = cfg.clone();
    other.epochs = 2;
    other.lr = 5e-4;
    let err = fit(&other, &archive, dir.path(), o.last_checkpoint.as_deref()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
}

#[test]
fn non_finite_loss_aborts_naming_the_last_checkpoint() {
    let archive = small_corpus(7);
    let mut cfg = small_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let o = fit(&cfg, &archive, dir.path(), None).unwrap();
    let good = o.last_checkpoint.unwrap();
    let mut ck = Checkpoint::read(&good).unwrap();
    let p = ck.params.iter_mut().find(|p| !p.frozen).unwrap();
    p.value.data_mut()[0] = f32::NAN;
    let poisoned = dir.path().join("poisoned.ckpt");
    ck.write(&poisoned).unwrap();

    cfg.epochs = 2;
    match fit(&cfg, &archive, dir.path(), Some(&poisoned)).unwrap_err() {
        Error::NonFiniteLoss { epoch, step, last_checkpoint } => {
            assert_eq!((epoch, step), (2, ck.meta.step));
            assert_eq!(last_checkpoint, Some(poisoned));
        }
        other => panic!("expected a non-finite loss, got {other}"),
    }
}

#[test]
fn frozen_encoder_is_untouched_by_training() {
    let archive = small_corpus(8);
    let mut cfg = small_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&cfg, &archive, dir.path(), None).unwrap();
    let ck = Checkpoint::read(out.last_checkpoint.as_ref().unwrap()).unwrap();
    let spec = AudioVisualModel::text_spec(&cfg.model);
    let fresh = FrozenTextEncoder::new(spec).unwrap();
    assert_eq!(ck.meta.frozen, vec![(spec, fresh.digest())]);
    assert_eq!(out.pipeline.model.text.digest(), fresh.digest());

    // a different training seed leaves the frozen encoder alone
    let mut reseeded = cfg.clone();
    reseeded.seed = 99;
    assert_eq!(AudioVisualModel::text_spec(&reseeded.model), AudioVisualModel::text_spec(&cfg.model));
}

#[test]
fn simi_report_marks_natural_columns_absent() {
    let archive = small_corpus(9);
    let mut cfg = small_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&cfg, &archive, dir.path(), None).unwrap();
    for p in [ExtractionPoint::FrameMean, ExtractionPoint::SegmentMean, ExtractionPoint::Sentence] {
        let r = out.pipeline.simi(&archive, p, "synthetic").unwrap();
        assert!(r.dev.synthetic.is_some() && r.test.synthetic.is_some());
        assert!(r.dev.natural.is_none() && r.test.natural.is_none());
        assert_eq!(r.dev_pairs + r.test_pairs, 30);
        assert_eq!(r.extraction_point, p.as_str());
    }
}

#[test]
fn ablation_protocols_emit_one_row_per_variant() {
    let archive = small_corpus(10);
    let mut base = small_config();
    base.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    for ab in [Ablation::vq(), Ablation::lambda(&[0.0, 1.0])] {
        let (report, json) = ab.run(&base, &archive, dir.path()).unwrap();
        assert_eq!(report.rows.len(), ab.variants.len());
        assert!(json.exists());
        let labels: Vec<_> = report.rows.iter().map(|r| r.label.as_str()).collect();
        let want: Vec<_> = ab.variants.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, want);
    }
}

#[test]
fn twin_training_runs_and_is_repeatable() {
    let archive = small_corpus(11);
    let mut cfg = small_config();
    cfg.epochs = 1;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = fit_twin(&cfg, &archive, a.path()).unwrap();
    let ob = fit_twin(&cfg, &archive, b.path()).unwrap();
    assert_eq!(oa.test, ob.test);
    assert_eq!(oa.test.branch, "right");
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(
        read(oa.last_checkpoint.as_ref().unwrap()),
        read(ob.last_checkpoint.as_ref().unwrap())
    );
}
