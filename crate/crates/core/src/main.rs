use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use brepmae::corpus::{CorpusConfig, Split};
use brepmae::finetune::{Subset, Task};
use brepmae::harness::{self, output_path, EvalTarget, RunConfig, EVAL_REPORT_FILE};
use brepmae::Result;

#[derive(Parser)]
#[command(name = "brepmae", version, about = "Masked BRep autoencoder: corpus, pre-training, fine-tuning, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Segmentation,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Segmentation => Task::Segmentation,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated template:count pairs.
        #[arg(long, default_value = "box:10,box_hole:10,box_slot:10,box_step:10,l_bracket:10,cyl_boss:10")]
        templates: String,
        #[arg(long, default_value = "70,15,15")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the gAAG of one model spec (`{"template": .., "seed": ..}`).
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-autoencoder pre-training on the train split.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "pretrain")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Fine-tune a task head, optionally on a pre-trained encoder.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "finetune")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Labeled models per class.
        #[arg(long, conflicts_with = "ratio")]
        shots: Option<usize>,
        /// Fraction of the train split.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        freeze_encoder: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_head: Option<f64>,
        #[arg(long)]
        lr_encoder: Option<f64>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Score a pre-training checkpoint under an untrained head for this task.
        #[arg(long, value_enum)]
        fresh_head: Option<TaskArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = EVAL_REPORT_FILE)]
        out: PathBuf,
    },
    /// Export original, masked and reconstructed point clouds of one model.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        gaag: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "reconstruct")]
        out: PathBuf,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { out, templates, split, seed } => {
            let config = CorpusConfig { counts: harness::parse_templates(&templates)?, split: harness::parse_split(&split)?, master_seed: seed };
            let out = output_path(&out);
            let m = harness::generate(&config, &out)?;
            println!("wrote {} models to {}", m.entries.len(), out.display());
        }
        Command::Extract { input, out } => {
            let out = output_path(&out);
            let g = harness::extract(&input, &out)?;
            println!("wrote {} ({} faces, {} edges)", out.display(), g.n_faces, g.n_edges);
        }
        Command::Pretrain { corpus, out, config, epochs, mask_ratio, seed, batch_size, lr, max_steps } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?.pretrain;
            set(&mut cfg.epochs, epochs);
            set(&mut cfg.mask_ratio, mask_ratio);
            set(&mut cfg.seed, seed);
            set(&mut cfg.batch_size, batch_size);
            set(&mut cfg.lr, lr);
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            let a = harness::run_pretrain(&corpus, &cfg, &output_path(&out), |epoch, loss| eprintln!("epoch {epoch} loss {loss:.6}"))?;
            println!("wrote {} and {}", a.checkpoint.display(), a.loss_csv.display());
        }
        Command::Finetune { corpus, checkpoint, out, config, task, shots, ratio, freeze_encoder, epochs, seed, batch_size, lr_head, lr_encoder } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?.finetune;
            set(&mut cfg.task, task.map(Task::from));
            set(&mut cfg.subset, shots.map(Subset::Shots).or(ratio.map(Subset::Ratio)));
            cfg.freeze_encoder |= freeze_encoder;
            set(&mut cfg.epochs, epochs);
            set(&mut cfg.seed, seed);
            set(&mut cfg.batch_size, batch_size);
            set(&mut cfg.lr_head, lr_head);
            set(&mut cfg.lr_encoder, lr_encoder);
            let a = harness::run_finetune(&corpus, checkpoint.as_deref(), &cfg, &output_path(&out), |r| {
                eprintln!("epoch {} train_loss {:.6} val_acc {:.4}", r.epoch, r.train_loss, r.val_acc)
            })?;
            println!("best epoch {}; wrote {} and {}", a.best_epoch, a.checkpoint.display(), a.metrics_csv.display());
        }
        Command::Eval { corpus, checkpoint, split, fresh_head, seed, out } => {
            let target = match fresh_head {
                Some(t) => {
                    let task = Task::from(t);
                    EvalTarget::FreshHead { task, classes: task.default_classes(), seed }
                }
                None => EvalTarget::Trained,
            };
            let out = output_path(&out);
            let report = harness::run_eval(&corpus, &checkpoint, split.into(), target, &out)?;
            print!("{}", report.table());
            println!("wrote {}", out.display());
        }
        Command::Reconstruct { checkpoint, gaag, mask_ratio, seed, out } => {
            let p = harness::run_reconstruct(&checkpoint, &gaag, mask_ratio, seed, &output_path(&out))?;
            for f in [&p.original, &p.masked, &p.reconstructed, &p.error] {
                println!("wrote {}", Path::new(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
