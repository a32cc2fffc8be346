//! Training orchestration: objective, epochs, model selection, checkpoints,
//! evaluation, ablation runs and embedding export.

mod checkpoint;
mod config;
mod model;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::evalzsl::{report, EvalReport, GridSpec};
use crate::synthdata::{derive_seed, Dataset, Partition};

pub use checkpoint::Checkpoint;
pub use config::{OptimizerKind, TrainConfig};
pub use model::{
    attribute_embeddings, build_loss, score_matrix, train_step, LabelSpace, LossComponents, Model, StepOutput,
    EVAL_CHUNK, MIN_HSIC_BATCH, STAGE_WIDTHS,
};
pub use optim::Optimizer;

/// An [`EvalReport`] without its curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub auc: f64,
    pub best_hm: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub closed_seen: f64,
    pub closed_unseen: f64,
}

impl From<&EvalReport> for ReportSummary {
    fn from(r: &EvalReport) -> Self {
        ReportSummary {
            auc: r.auc,
            best_hm: r.best_hm,
            best_seen: r.best_seen,
            best_unseen: r.best_unseen,
            closed_seen: r.closed_seen,
            closed_unseen: r.closed_unseen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub losses: LossComponents,
    pub train_acc: f64,
    pub val: ReportSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: ReportSummary,
    pub test: ReportSummary,
}

impl MetricsRecord {
    /// One JSON object per epoch, then one `final` line.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain data serializes"));
            out.push('\n');
        }
        let fin = serde_json::json!({
            "final": { "best_epoch": self.best_epoch, "val": self.best_val, "test": self.test }
        });
        out.push_str(&fin.to_string());
        out.push('\n');
        out
    }
}

fn grid_spec(cfg: &TrainConfig) -> GridSpec {
    GridSpec::Uniform { steps: cfg.grid_steps }
}

/// Evaluates `model` on one split of `ds`.
pub fn evaluate_model(
    model: &Model,
    cfg: &TrainConfig,
    space: &LabelSpace,
    ds: &Dataset,
    part: Partition,
) -> Result<EvalReport> {
    let sm = score_matrix(model, space, ds.split(part))?;
    report(&sm, &grid_spec(cfg))
}

/// Trains on `ds.train`, selecting the epoch with the best validation harmonic mean.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<(Checkpoint, MetricsRecord)> {
    train_with(cfg, ds, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, MetricsRecord)> {
    cfg.validate()?;
    ds.validate()?;
    let space = LabelSpace::new(&ds.vocab, &ds.splits)?;
    let mut model = Model::init(cfg, &ds.vocab);
    let n_bb = model.n_backbone_params();
    let frozen: Vec<bool> = (0..model.named_params().len()).map(|i| i < n_bb && !cfg.finetune).collect();
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = Optimizer::new(cfg, &shape_refs);

    let init_val = evaluate_model(&model, cfg, &space, ds, Partition::Val)?;
    let mut best = (model.clone(), 0, ReportSummary::from(&init_val));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let train = &ds.train;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xE90C, epoch as u64])));
        let mut sums = LossComponents::default();
        let mut correct = 0;
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<_> = idx.iter().map(|&i| train.labels[i]).collect();
            let out = train_step(&model, cfg, &space, train.batch(idx), &labels)?;
            sums.add_scaled(&out.losses, idx.len() as f64);
            correct += out.correct;
            opt.step(model.params_mut(), &out.grads, &frozen);
            if let Some((name, _)) = model.named_params().into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Numerical(format!("parameter {name} became non-finite in epoch {epoch}")));
            }
        }
        let mut losses = LossComponents::default();
        losses.add_scaled(&sums, 1.0 / train.len() as f64);
        let val = ReportSummary::from(&evaluate_model(&model, cfg, &space, ds, Partition::Val)?);
        let rec = EpochRecord { epoch, losses, train_acc: correct as f64 / train.len() as f64, val };
        on_epoch(&rec);
        if epoch == 1 || val.best_hm > best.2.best_hm {
            best = (model.clone(), epoch, val);
        }
        epochs.push(rec);
    }

    let (best_model, best_epoch, best_val) = best;
    let test = ReportSummary::from(&evaluate_model(&best_model, cfg, &space, ds, Partition::Test)?);
    let ckpt = Checkpoint {
        model: best_model,
        config: cfg.clone(),
        epoch: best_epoch,
        val_hm: best_val.best_hm,
        vocab: ds.vocab.clone(),
        splits: ds.splits.clone(),
    };
    Ok((ckpt, MetricsRecord { epochs, best_epoch, best_val, test }))
}

fn check_label_space(ckpt: &Checkpoint, ds: &Dataset) -> Result<LabelSpace> {
    if ckpt.vocab != ds.vocab || ckpt.splits != ds.splits {
        return Err(contract_err!("checkpoint label space does not match the dataset"));
    }
    LabelSpace::new(&ds.vocab, &ds.splits)
}

/// Full report of a checkpoint on one split.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, part: Partition) -> Result<EvalReport> {
    let space = check_label_space(ckpt, ds)?;
    evaluate_model(&ckpt.model, &ckpt.config, &space, ds, part)
}

/// Files written by [`run_training`].
pub struct RunArtifacts {
    pub checkpoint_dir: PathBuf,
    pub metrics_log: PathBuf,
    pub report_json: PathBuf,
}

/// Loads the configured dataset, trains, and writes `checkpoint/`, `metrics.log`,
/// `report.json` and `test_curve.tsv` under `out_dir`.
pub fn run_training(
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, MetricsRecord, RunArtifacts)> {
    let out = out_dir.as_ref();
    let ds = Dataset::load(&cfg.dataset)?;
    let (ckpt, metrics) = train_with(cfg, &ds, on_epoch)?;
    fs::create_dir_all(out)?;
    let checkpoint_dir = out.join("checkpoint");
    ckpt.save(&checkpoint_dir)?;
    let metrics_log = out.join("metrics.log");
    fs::write(&metrics_log, metrics.to_log())?;
    let test = evaluate(&ckpt, &ds, Partition::Test)?;
    let report_json = out.join("report.json");
    let doc = serde_json::json!({
        "best_epoch": metrics.best_epoch,
        "val": metrics.best_val,
        "test": ReportSummary::from(&test),
    });
    fs::write(&report_json, serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))? + "\n")?;
    fs::write(out.join("test_curve.tsv"), test.curve.to_text())?;
    Ok((ckpt, metrics, RunArtifacts { checkpoint_dir, metrics_log, report_json }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub independence: bool,
    pub finetune: bool,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm { independence: false, finetune: true },
        Arm { independence: false, finetune: false },
        Arm { independence: true, finetune: false },
        Arm { independence: true, finetune: true },
    ];

    pub fn label(self) -> String {
        format!(
            "indep={} finetune={}",
            if self.independence { "on" } else { "off" },
            if self.finetune { "on" } else { "off" }
        )
    }
}

/// Test-split accuracies at the best-harmonic-mean operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub runs: Vec<SeedResult>,
}

/// Mean and standard error of the mean (sample standard deviation over `√n`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl ArmResult {
    pub fn stat(&self, f: impl Fn(&SeedResult) -> f64) -> (f64, f64) {
        mean_se(&self.runs.iter().map(f).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    pub fn arm(&self, independence: bool, finetune: bool) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == Arm { independence, finetune })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("arm                          seen            unseen          hm\n");
        for a in &self.arms {
            let cell = |(m, e): (f64, f64)| format!("{:.4} ± {:.4}", m, e);
            let _ = writeln!(
                s,
                "{:<28} {:<15} {:<15} {}",
                a.arm.label(),
                cell(a.stat(|r| r.seen)),
                cell(a.stat(|r| r.unseen)),
                cell(a.stat(|r| r.hm))
            );
        }
        s
    }
}

/// Trains every arm of {independence on/off} × {finetune on/off} for each seed.
///
/// Runs are independent and spread over the available cores.
pub fn ablation_suite(cfg: &TrainConfig, ds: &Dataset, seeds: &[u64]) -> Result<AblationTable> {
    let jobs: Vec<(Arm, u64)> = Arm::ALL.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let run = |(arm, seed): (Arm, u64)| -> Result<SeedResult> {
        let c = TrainConfig { seed, independence: arm.independence, finetune: arm.finetune, ..cfg.clone() };
        let (_, m) = train(&c, ds)?;
        Ok(SeedResult { seed, seen: m.test.best_seen, unseen: m.test.best_unseen, hm: m.test.best_hm })
    };
    let mut results: Vec<Option<Result<SeedResult>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = run(jobs[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut arms: Vec<ArmResult> = Arm::ALL.iter().map(|&arm| ArmResult { arm, runs: Vec::new() }).collect();
    for ((arm, _), r) in jobs.iter().zip(results) {
        let r = r.expect("every job ran")?;
        arms.iter_mut().find(|a| a.arm == *arm).expect("known arm").runs.push(r);
    }
    Ok(AblationTable { arms })
}

/// Writes `embeddings.ppt` (`[N, C]` softmax-pooled `z_a`), `labels.ppt`
/// (`[N, 2]`: attribute, object) and `embeddings.txt` under `out_dir`.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    ds: &Dataset,
    part: Partition,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    check_label_space(ckpt, ds)?;
    let data = ds.split(part);
    let z = attribute_embeddings(&ckpt.model, data)?;
    let (n, c) = (z.rows(), z.cols());
    let labels = data.labels.iter().flat_map(|l| [l.attr as f64, l.obj as f64]).collect();
    let labels = crate::numgrad::Tensor::new(&[n, 2], labels)?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let path = out.join("embeddings.ppt");
    z.save(&path)?;
    labels.save(out.join("labels.ppt"))?;
    let manifest = format!(
        "split {}\nrows {n}\nembedding_width {c}\nembeddings embeddings.ppt\nlabels labels.ppt attr,obj\nattributes {}\nobjects {}\n",
        part.name(),
        ds.vocab.attributes.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(","),
        ds.vocab.objects.iter().map(|o| o.name.as_str()).collect::<Vec<_>>().join(","),
    );
    fs::write(out.join("embeddings.txt"), manifest)?;
    Ok(path)
}
