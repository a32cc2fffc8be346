mod common;

use common::{tiny_config, tiny_dataset};
use czsl::compgraph::classify;
use czsl::numgrad::Tensor;
use czsl::synthdata::{Dataset, Partition};
use czsl::trainer::{
    evaluate, export_embeddings, run_training, score_matrix, train, train_step, Checkpoint, LabelSpace, Model,
    OptimizerKind, TrainConfig,
};
use czsl::Error;

fn first_batch(ds: &Dataset, n: usize) -> (Tensor, Vec<czsl::synthdata::CompositionalLabel>) {
    let idx: Vec<usize> = (0..n.min(ds.train.len())).collect();
    (ds.train.batch(&idx), idx.iter().map(|&i| ds.train.labels[i]).collect())
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = tiny_dataset(1);
    let cfg = tiny_config(0);
    let (ckpt, m) = train(&cfg, &ds).unwrap();
    assert_eq!(ckpt.epoch, 0);
    assert!(m.epochs.is_empty());
    assert_eq!(ckpt.model, Model::init(&cfg, &ds.vocab));
    assert_eq!(m.best_val.best_hm, ckpt.val_hm);
}

#[test]
fn identical_runs_write_identical_logs() {
    let ds = tiny_dataset(2);
    let cfg = tiny_config(2);
    let (c1, m1) = train(&cfg, &ds).unwrap();
    let (c2, m2) = train(&cfg, &ds).unwrap();
    assert_eq!(m1.to_log(), m2.to_log());
    assert_eq!(c1.model, c2.model);
}

#[test]
fn different_seeds_differ() {
    let ds = tiny_dataset(2);
    let (_, m1) = train(&tiny_config(1), &ds).unwrap();
    let (_, m2) = train(&TrainConfig { seed: 9, ..tiny_config(1) }, &ds).unwrap();
    assert_ne!(m1.to_log(), m2.to_log());
}

#[test]
fn checkpoint_roundtrip_reproduces_validation_hm() {
    let ds = tiny_dataset(3);
    let (ckpt, m) = train(&tiny_config(2), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, ckpt);
    let r = evaluate(&back, &ds, Partition::Val).unwrap();
    assert_eq!(r.best_hm, ckpt.val_hm);
    assert_eq!(r.best_hm, m.best_val.best_hm);
    let t = evaluate(&back, &ds, Partition::Test).unwrap();
    assert_eq!(t.auc, m.test.auc);
}

#[test]
fn corrupted_checkpoint_is_a_format_error() {
    let ds = tiny_dataset(3);
    let (ckpt, _) = train(&tiny_config(0), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    std::fs::write(dir.path().join("theta1.ppt"), b"PPT1garbage").unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn evaluating_on_a_foreign_label_space_is_rejected() {
    let (ckpt, _) = train(&tiny_config(0), &tiny_dataset(3)).unwrap();
    let other = tiny_dataset(4);
    if other.splits != ckpt.splits {
        assert!(matches!(evaluate(&ckpt, &other, Partition::Val), Err(Error::Contract(_))));
    }
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let ds = tiny_dataset(5);
    let cfg = tiny_config(0);
    let space = LabelSpace::new(&ds.vocab, &ds.splits).unwrap();
    let model = Model::init(&cfg, &ds.vocab);
    let sm = score_matrix(&model, &space, &ds.test).unwrap();
    let k = sm.n_classes();
    let hits = (0..sm.labels.len()).filter(|&i| classify(sm.scores.row(i)) == sm.labels[i]).count();
    let acc = hits as f64 / sm.labels.len() as f64;
    assert!(acc <= 3.0 / k as f64, "untrained accuracy {acc} with {k} classes");
}

#[test]
fn frozen_backbone_gets_zero_gradient() {
    let ds = tiny_dataset(6);
    let cfg = TrainConfig { finetune: false, ..tiny_config(1) };
    let space = LabelSpace::new(&ds.vocab, &ds.splits).unwrap();
    let model = Model::init(&cfg, &ds.vocab);
    let (x, y) = first_batch(&ds, 16);
    let out = train_step(&model, &cfg, &space, x, &y).unwrap();
    let nb = model.n_backbone_params();
    assert!(out.grads[..nb].iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(out.grads[nb..].iter().all(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn initial_loss_is_finite_and_positive() {
    let ds = tiny_dataset(6);
    let cfg = tiny_config(1);
    let space = LabelSpace::new(&ds.vocab, &ds.splits).unwrap();
    let model = Model::init(&cfg, &ds.vocab);
    let (x, y) = first_batch(&ds, 16);
    let l = train_step(&model, &cfg, &space, x, &y).unwrap().losses;
    assert!(l.total.is_finite() && l.total > 0.0);
    assert!(l.hsic > 0.0);
    let sum = l.ce_attr + l.ce_obj + l.ce_comp + l.hsic + l.clst + l.sep;
    assert!((sum - l.total).abs() < 1e-12 * l.total.max(1.0));
}

#[test]
fn only_compositional_ce_when_other_weights_are_zero() {
    let ds = tiny_dataset(6);
    let cfg = TrainConfig {
        ce_attr_weight: 0.0,
        ce_obj_weight: 0.0,
        clst_weight: 0.0,
        sep_weight: 0.0,
        independence: false,
        ..tiny_config(1)
    };
    let space = LabelSpace::new(&ds.vocab, &ds.splits).unwrap();
    let model = Model::init(&cfg, &ds.vocab);
    let (x, y) = first_batch(&ds, 16);
    let l = train_step(&model, &cfg, &space, x, &y).unwrap().losses;
    assert_eq!(l.total, l.ce_comp);
    assert_eq!((l.ce_attr, l.ce_obj, l.hsic, l.clst, l.sep), (0.0, 0.0, 0.0, 0.0, 0.0));
}

#[test]
fn hsic_is_skipped_for_small_batches() {
    let ds = tiny_dataset(6);
    let cfg = tiny_config(1);
    let space = LabelSpace::new(&ds.vocab, &ds.splits).unwrap();
    let model = Model::init(&cfg, &ds.vocab);
    let (x, y) = first_batch(&ds, 4);
    assert_eq!(train_step(&model, &cfg, &space, x, &y).unwrap().losses.hsic, 0.0);
}

#[test]
fn training_loss_decreases() {
    let ds = tiny_dataset(7);
    let (_, m) = train(&tiny_config(5), &ds).unwrap();
    let first = m.epochs.first().unwrap().losses.total;
    let last = m.epochs.last().unwrap().losses.total;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn both_optimizers_train() {
    let ds = tiny_dataset(7);
    let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, learning_rate: 0.01, ..tiny_config(2) };
    let (_, m) = train(&cfg, &ds).unwrap();
    assert!(m.epochs.iter().all(|e| e.losses.total.is_finite()));
}

#[test]
fn divergence_aborts_with_a_numerical_error() {
    let ds = tiny_dataset(8);
    let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, learning_rate: 1e300, ..tiny_config(2) };
    let err = train(&cfg, &ds).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn invalid_config_is_a_contract_error() {
    let ds = tiny_dataset(8);
    let cfg = TrainConfig { batch_size: 0, ..tiny_config(1) };
    assert_eq!(train(&cfg, &ds).unwrap_err().exit_code(), 1);
}

#[test]
fn run_training_writes_all_artifacts() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(9);
    ds.save(data.path()).unwrap();
    let cfg = TrainConfig { dataset: data.path().into(), ..tiny_config(2) };
    let mut seen = Vec::new();
    let (ckpt, m, art) = run_training(&cfg, out.path(), |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    let log = std::fs::read_to_string(&art.metrics_log).unwrap();
    assert_eq!(log, m.to_log());
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().last().unwrap().starts_with("{\"final\""));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&art.report_json).unwrap()).unwrap();
    assert_eq!(report["test"]["best_hm"].as_f64().unwrap(), m.test.best_hm);
    assert_eq!(Checkpoint::load(&art.checkpoint_dir).unwrap(), ckpt);
    let curve = std::fs::read_to_string(out.path().join("test_curve.tsv")).unwrap();
    assert!(curve.lines().count() > 2);
}

#[test]
fn embedding_export_has_one_row_per_sample_and_is_reproducible() {
    let ds = tiny_dataset(10);
    let cfg = tiny_config(1);
    let (ckpt, _) = train(&cfg, &ds).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = export_embeddings(&ckpt, &ds, Partition::Test, a.path()).unwrap();
    let pb = export_embeddings(&ckpt, &ds, Partition::Test, b.path()).unwrap();
    let z = Tensor::load(&pa).unwrap();
    assert_eq!(z.shape(), &[ds.test.len(), cfg.proto_dim]);
    let labels = Tensor::load(a.path().join("labels.ppt")).unwrap();
    for (i, lab) in ds.test.labels.iter().enumerate() {
        assert_eq!(labels.row(i), &[lab.attr as f64, lab.obj as f64]);
    }
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    assert_eq!(
        std::fs::read(a.path().join("labels.ppt")).unwrap(),
        std::fs::read(b.path().join("labels.ppt")).unwrap()
    );
}

#[test]
fn zero_lambda_matches_independence_off() {
    let ds = tiny_dataset(11);
    let (_, a) = train(&TrainConfig { lambda_h: 0.0, ..tiny_config(2) }, &ds).unwrap();
    let (_, b) = train(&TrainConfig { independence: false, ..tiny_config(2) }, &ds).unwrap();
    assert_eq!(a.to_log(), b.to_log());
}
