use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};

use czsl::synthdata::{generate_dataset, Dataset, Partition, PrimitiveVocab, SplitSpec};
use czsl::trainer::{ablation_suite, evaluate, export_embeddings, run_training, Checkpoint, TrainConfig};
use czsl::Result;

#[derive(Parser)]
#[command(name = "czsl", version, about = "Compositional zero-shot learning on synthetic attribute/object images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a seen/unseen composition split.
    GenData {
        #[arg(long, default_value_t = 8)]
        attrs: usize,
        #[arg(long, default_value_t = 3)]
        objs: usize,
        /// Unseen:seen composition ratio.
        #[arg(long, default_value = "2:8")]
        ratio: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tint training backgrounds by object.
        #[arg(long, value_name = "on|off", default_value = "off", value_parser = parse_on_off, action = ArgAction::Set)]
        bias_mode: bool,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        val_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, metrics.log and report.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write the (bias, acc_seen, acc_unseen) curve here.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Run the independence × finetune ablation over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write softmax-pooled attribute embeddings with their labels.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn load_for(ckpt: &Checkpoint, dataset: &Option<PathBuf>) -> Result<Dataset> {
    Dataset::load(dataset.as_ref().unwrap_or(&ckpt.config.dataset))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            attrs,
            objs,
            ratio,
            seed,
            bias_mode,
            train_per_class,
            val_per_class,
            test_per_class,
            out,
        } => {
            let (unseen_ratio, seen_ratio) = SplitSpec::parse_ratio(&ratio)?;
            let spec =
                SplitSpec { unseen_ratio, seen_ratio, seed, train_per_class, val_per_class, test_per_class, bias_mode };
            let ds = generate_dataset(&PrimitiveVocab::grid(attrs, objs)?, &spec)?;
            ds.save(&out)?;
            println!(
                "wrote {}: {} seen / {} unseen compositions, {} train, {} val, {} test",
                out.display(),
                ds.splits.seen.len(),
                ds.splits.unseen.len(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            );
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let start = Instant::now();
            let (ckpt, metrics, art) = run_training(&cfg, &out, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train_acc {:.3}  val_hm {:.4}  val_auc {:.4}  [{:.1}s]",
                    e.epoch,
                    e.losses.total,
                    e.train_acc,
                    e.val.best_hm,
                    e.val.auc,
                    start.elapsed().as_secs_f64()
                );
            })?;
            println!("best_epoch {}", ckpt.epoch);
            println!("val_hm {}", ckpt.val_hm);
            let t = metrics.test;
            println!(
                "test_auc {}\ntest_best_hm {}\ntest_best_seen {}\ntest_best_unseen {}",
                t.auc, t.best_hm, t.best_seen, t.best_unseen
            );
            println!("test_closed_seen {}\ntest_closed_unseen {}", t.closed_seen, t.closed_unseen);
            eprintln!(
                "checkpoint {}  metrics {}  report {}",
                art.checkpoint_dir.display(),
                art.metrics_log.display(),
                art.report_json.display()
            );
        }
        Command::Eval { checkpoint, split, dataset, curve } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load_for(&ckpt, &dataset)?;
            let r = evaluate(&ckpt, &ds, Partition::parse(&split)?)?;
            print!("{}", r.to_record());
            if let Some(p) = curve {
                std::fs::write(p, r.curve.to_text())?;
            }
        }
        Command::Ablate { cfg, seeds, out } => {
            let cfg = cfg.resolve()?;
            let ds = Dataset::load(&cfg.dataset)?;
            let table = ablation_suite(&cfg, &ds, &seeds)?;
            print!("{}", table.to_text());
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&table).map_err(|e| czsl::Error::Format(e.to_string()))?;
                std::fs::write(p, json + "\n")?;
            }
        }
        Command::ExportEmbeddings { checkpoint, split, dataset, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load_for(&ckpt, &dataset)?;
            let path = export_embeddings(&ckpt, &ds, Partition::parse(&split)?, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // usage errors are contract errors (exit 1); 2 is reserved for numerical aborts
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
