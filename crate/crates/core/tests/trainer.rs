mod common;

use dbdc::backbone::ModalityBatch;
use dbdc::data::{LabelFilter, Split};
use dbdc::graph::ParamKey;
use dbdc::tensor::Tensor;
use dbdc::trainer::{StepContext, Trainer};
use dbdc::Error;

use common::{tiny_config, tiny_dataset};

#[test]
fn step_round_reports_finite_losses() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 1);
    let mut t = Trainer::new(tiny_config(2, 3), &ds).unwrap();
    let reports = t.step_round().unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert!(r.all_finite());
        assert!(r.get("sup/ce").unwrap() > 0.0);
        assert!(r.get("dc").is_some());
        // first epoch: ramp at its floor
        assert!((r.get("lambda").unwrap() - (-5.0f64).exp()).abs() < 1e-12);
    }
    assert_eq!(t.current_step(), 1);
}

#[test]
fn zero_lambda_skips_the_unlabeled_branch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 1);
    let mut cfg = tiny_config(2, 3);
    cfg.loss.lambda_max = 0.0;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    for r in t.step_round().unwrap() {
        assert!(r.get("dc").is_none());
        assert_eq!(r.get("modal"), r.get("sup"));
    }
}

#[test]
fn hundred_rounds_stay_finite() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 1);
    let mut cfg = tiny_config(10, 2);
    cfg.loss.lambda_max = 1.0;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    for _ in 0..100 {
        for r in t.step_round().unwrap() {
            assert!(r.all_finite(), "{:?}", r.terms);
        }
    }
}

#[test]
fn zero_lambda_unlabeled_branch_adds_no_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 1);
    let mut t = Trainer::new(tiny_config(2, 3), &ds).unwrap();
    let (lb, ub) = t.next_batches(1).unwrap();
    let ub = ub.expect("unlabeled branch active");
    let ctx = StepContext { step: 0, lambda: 0.0 };
    let with = t.modality_step(&lb, Some(&ub), ctx).unwrap();
    let without = t.modality_step(&lb, None, ctx).unwrap();
    assert!(with.report.get("dc").unwrap() > 0.0);
    assert_eq!(with.grads, without.grads);
}

#[test]
fn supervised_loss_descends_on_fixed_set() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 16, 2);
    let mut cfg = tiny_config(50, 5);
    cfg.loss.lambda_max = 0.0;
    cfg.train.crop_size = 0;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let batch = ds.batches(0, Split::Train, LabelFilter::Labeled).unwrap();
    let samples: Vec<_> = batch.iter().take(4).collect();
    assert_eq!(samples.len(), 4);
    let images: Vec<f32> = samples.iter().flat_map(|b| b.images.data().to_vec()).collect();
    let labels: Vec<usize> = samples.iter().flat_map(|b| b.labels.clone().unwrap()).collect();
    let toy = ModalityBatch::new(Tensor::from_vec(&[4, 1, 32, 32], images).unwrap(), Some(labels), 0).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| t.train_step(&toy, None).unwrap().get("sup").unwrap()).collect();
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let moving: Vec<f64> = losses.windows(10).map(avg).collect();
    assert!(moving.windows(2).all(|p| p[1] < p[0]), "{moving:?}");
    assert!(moving[moving.len() - 1] < 0.8 * moving[0], "{moving:?}");
}

#[test]
fn one_round_touches_only_visited_bank_entries() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 1);
    let mut t = Trainer::new(tiny_config(2, 3), &ds).unwrap();
    let before = t.mlmb().clone();
    let (lb, ub) = t.next_batches(0).unwrap();
    let ctx = StepContext { step: 0, lambda: 0.5 };
    let step = t.modality_step(&lb, ub.as_ref(), ctx).unwrap();
    for key in step.grads.keys() {
        if let ParamKey::Gamma(site, e) | ParamKey::Beta(site, e) = *key {
            assert_eq!(e, t.mlmb().entry_index(site, 0).unwrap());
        }
    }
    let protos1 = t.mlpb().prototypes(1).unwrap().to_vec();
    t.apply(&[step], 1e-3).unwrap();
    for site in 0..before.num_sites() {
        let (a, b) = (before.entry(site, 1).unwrap(), t.mlmb().entry(site, 1).unwrap());
        assert_eq!((&a.gamma, &a.beta, &a.mean, &a.var), (&b.gamma, &b.beta, &b.mean, &b.var));
        assert_ne!(before.entry(site, 0).unwrap().gamma, t.mlmb().entry(site, 0).unwrap().gamma);
    }
    assert_eq!(protos1, t.mlpb().prototypes(1).unwrap());
}

#[test]
fn mismatched_batches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 1);
    let mut t = Trainer::new(tiny_config(2, 3), &ds).unwrap();
    let (lb, _) = t.next_batches(0).unwrap();
    let (_, ub) = t.next_batches(1).unwrap();
    let ctx = StepContext { step: 0, lambda: 0.5 };
    assert!(matches!(t.modality_step(&lb, ub.as_ref(), ctx), Err(Error::Contract(_))));
}

#[test]
fn same_seed_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 32, 8, 4);
    let run = |seed| {
        let mut t = Trainer::new(tiny_config(2, seed), &ds).unwrap();
        let s = t.fit(None).unwrap();
        (s.epochs.iter().map(|e| e.val_dsc.clone()).collect::<Vec<_>>(), t.net().params().to_vec())
    };
    let a = run(9);
    assert_eq!(a, run(9));
    assert_ne!(a.1, run(10).1);
}

#[test]
fn fit_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&dir.path().join("data"), 32, 8, 4);
    let out = dir.path().join("run");
    let mut t = Trainer::new(tiny_config(2, 1), &ds).unwrap();
    let summary = t.fit(Some(&out)).unwrap();
    assert_eq!(summary.epochs.len(), 2);
    for f in ["metrics.csv", "losses.csv", "maw.csv", "config.json", "checkpoints/best/manifest.json", "checkpoints/last/manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    let last = dbdc::checkpoint::Checkpoint::load(&out.join("checkpoints/last")).unwrap();
    assert_eq!(last.epoch, 2);
    assert_eq!(last.net.params(), t.net().params());
}
