//! Run orchestration behind the command-line tool: configuration files,
//! corpus generation, training runs with their artifacts, evaluation and
//! reconstruction export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, RngState};
use crate::corpus::{generate_corpus, Corpus, CorpusConfig, Manifest, ModelSpec, Split, TemplateCount};
use crate::embed::{make_mask, ModelConfig};
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;
use crate::export::{export_reconstruction, ExportPaths};
use crate::finetune::{few_shot_sample, finetune, metrics_csv, FinetuneConfig, Task, TaskModel};
use crate::gaag::{build_gaag, read_gaag, write_gaag, Gaag};
use crate::nn::ParamStore;
use crate::pretrain::{loss_csv, pretrain, MaskedAutoencoder, TrainConfig};
use crate::synth::generate_model;

/// Environment variable naming the directory relative output paths resolve against.
pub const OUT_ENV: &str = "BREPMAE_OUT";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_CSV_FILE: &str = "loss.csv";
pub const TASK_CHECKPOINT_FILE: &str = "task.ckpt";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const EVAL_REPORT_FILE: &str = "eval.json";

/// Everything a run may consume, as read from `--config` and then
/// overridden from the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Reads `path` when given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Resolves a relative output path against `$BREPMAE_OUT` when it is set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn compact_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config serializes")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `box:10,box_hole:5`.
pub fn parse_templates(text: &str) -> Result<Vec<TemplateCount>> {
    text.split(',')
        .map(|item| {
            let (name, count) = item.trim().split_once(':').ok_or_else(|| Error::Config(format!("expected template:count, got '{item}'")))?;
            let count = count.parse().map_err(|_| Error::Config(format!("bad count in '{item}'")))?;
            Ok(TemplateCount { template: name.parse()?, count })
        })
        .collect()
}

/// Parses `70,15,15` into train/val/test weights.
pub fn parse_split(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad split value '{p}'"))))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::Config(format!("split needs three values, got '{text}'")))
}

pub fn generate(config: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    generate_corpus(config, out_dir)
}

/// Builds the gAAG of the model described by the JSON spec at `spec_path`.
pub fn extract(spec_path: &Path, out_path: &Path) -> Result<Gaag> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Format(format!("model spec: {e}")))?;
    let g = build_gaag(&generate_model(spec.template, spec.seed)?)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_gaag(&g, out_path)?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
}

/// Pre-trains on the train split of the corpus at `corpus_dir` and writes
/// the checkpoint and per-epoch loss CSV into `out_dir`.
pub fn run_pretrain(corpus_dir: &Path, config: &TrainConfig, out_dir: &Path, on_epoch: impl FnMut(usize, f64)) -> Result<PretrainArtifacts> {
    let corpus = Corpus::open(corpus_dir)?;
    let train = corpus.load_split(Split::Train)?;
    let mut on_epoch = on_epoch;
    let (trainer, history) = pretrain::<f32>(&train, config, |_, _| {})?;
    for h in &history {
        on_epoch(h.epoch, h.loss.total);
    }
    let config_json = compact_json(config);
    create_dir(out_dir)?;
    let ckpt = Checkpoint::from_store(
        CheckpointKind::Pretrain,
        serde_json::to_value(config).expect("config serializes"),
        Some(corpus.manifest.hash()),
        RngState { seed: config.seed, step: trainer.steps_done() as u64 },
        &trainer.store,
    );
    let paths = PretrainArtifacts {
        checkpoint: out_dir.join(CHECKPOINT_FILE),
        loss_csv: out_dir.join(LOSS_CSV_FILE),
        final_loss: history.last().map_or(f64::NAN, |h| h.loss.total),
    };
    ckpt.save(&paths.checkpoint)?;
    write_text(&paths.loss_csv, &loss_csv(&history, &config_json))?;
    Ok(paths)
}

fn header_field<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt.header.config.get(key).ok_or_else(|| Error::Format(format!("checkpoint config lacks '{key}'")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint config '{key}': {e}")))
}

/// Rebuilds a pre-trained autoencoder from its checkpoint.
pub fn load_autoencoder(ckpt: &Checkpoint) -> Result<(MaskedAutoencoder, ParamStore<f32>)> {
    if ckpt.header.kind != CheckpointKind::Pretrain {
        return Err(Error::Format("expected a pre-training checkpoint".into()));
    }
    let cfg: ModelConfig = header_field(ckpt, "model")?;
    let mut store = ParamStore::new();
    let model = MaskedAutoencoder::new(&mut store, &cfg, 0);
    ckpt.restore(&mut store)?;
    Ok((model, store))
}

/// Rebuilds a fine-tuned task model from its checkpoint.
pub fn load_task_model(ckpt: &Checkpoint) -> Result<(TaskModel, ParamStore<f32>)> {
    if ckpt.header.kind != CheckpointKind::Finetune {
        return Err(Error::Format("expected a fine-tuning checkpoint".into()));
    }
    let cfg: FinetuneConfig = serde_json::from_value(ckpt.header.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut store = ParamStore::new();
    let model = TaskModel::new(&mut store, &cfg.model, cfg.task, cfg.classes(), 0)?;
    ckpt.restore(&mut store)?;
    Ok((model, store))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneArtifacts {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub best_epoch: usize,
}

/// Fine-tunes on the labeled subset of the train split, validating on the
/// val split. Starts from `pretrained` when given, else from random weights
/// shaped by `config.model`.
pub fn run_finetune(
    corpus_dir: &Path,
    pretrained: Option<&Path>,
    config: &FinetuneConfig,
    out_dir: &Path,
    on_epoch: impl FnMut(&crate::finetune::MetricsRow),
) -> Result<FinetuneArtifacts> {
    let corpus = Corpus::open(corpus_dir)?;
    let entries = few_shot_sample(&corpus.manifest, config.subset, config.seed)?;
    let train = entries.iter().map(|e| corpus.load(e)).collect::<Result<Vec<_>>>()?;
    let val = corpus.load_split(Split::Val)?;
    let source = pretrained.map(|p| Checkpoint::load(p).and_then(|c| load_autoencoder(&c))).transpose()?;
    let mut effective = config.clone();
    if let Some((m, _)) = &source {
        effective.model = m.config.clone();
    }
    let outcome = finetune::<f32>(source.as_ref().map(|(m, s)| (&m.config, s)), &train, &val, &effective, on_epoch)?;
    create_dir(out_dir)?;
    let ckpt = Checkpoint::from_store(
        CheckpointKind::Finetune,
        serde_json::to_value(&effective).expect("config serializes"),
        Some(corpus.manifest.hash()),
        RngState { seed: config.seed, step: outcome.best_epoch as u64 },
        &outcome.store,
    );
    let paths = FinetuneArtifacts {
        checkpoint: out_dir.join(TASK_CHECKPOINT_FILE),
        metrics_csv: out_dir.join(METRICS_CSV_FILE),
        best_epoch: outcome.best_epoch,
    };
    ckpt.save(&paths.checkpoint)?;
    write_text(&paths.metrics_csv, &metrics_csv(&outcome.trace, &compact_json(&effective)))?;
    Ok(paths)
}

/// What `run_eval` scores: a fine-tuned model, or a pre-trained encoder
/// under a freshly initialized head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalTarget {
    Trained,
    FreshHead { task: Task, classes: usize, seed: u64 },
}

/// Evaluates a checkpoint on one split and writes the report JSON to `out`.
pub fn run_eval(corpus_dir: &Path, checkpoint: &Path, split: Split, target: EvalTarget, out: &Path) -> Result<EvalReport> {
    let corpus = Corpus::open(corpus_dir)?;
    let samples = corpus.load_split(split)?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("{split} split is empty")));
    }
    let graphs: Vec<&Gaag> = samples.iter().map(|s| &s.graph).collect();
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, store) = match target {
        EvalTarget::Trained => load_task_model(&ckpt)?,
        EvalTarget::FreshHead { task, classes, seed } => {
            let (ae, source) = load_autoencoder(&ckpt)?;
            let mut store = ParamStore::new();
            let model = TaskModel::new(&mut store, &ae.config, task, classes, seed)?;
            crate::finetune::load_encoder(&mut store, &source)?;
            (model, store)
        }
    };
    let report = model.evaluate(&store, &graphs)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(out, &report.to_json())?;
    Ok(report)
}

/// Masks `gaag_path` with the given ratio and seed, reconstructs it with a
/// pre-trained checkpoint and writes the four point files.
pub fn run_reconstruct(checkpoint: &Path, gaag_path: &Path, mask_ratio: f64, seed: u64, out_dir: &Path) -> Result<ExportPaths> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, store) = load_autoencoder(&ckpt)?;
    let g = read_gaag(gaag_path)?;
    let mask = make_mask(g.n_faces, g.n_edges, mask_ratio, seed)?;
    let stem = gaag_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let provenance = serde_json::json!({ "checkpoint": ckpt.header.config, "mask_ratio": mask_ratio, "seed": seed });
    export_reconstruction(&model, &store, &g, &mask, out_dir, stem, &provenance.to_string())
}
