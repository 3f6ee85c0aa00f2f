//! Few-shot fine-tuning of a classification head, from a briefly pre-trained
//! encoder and from random weights.
//!
//! `cargo run --release --example few_shot_finetune`

use brepmae::corpus::{materialize, plan_corpus, CorpusConfig, Split};
use brepmae::embed::ModelConfig;
use brepmae::finetune::{few_shot_sample, finetune, FinetuneConfig, Subset, Task};
use brepmae::gaag::Gaag;
use brepmae::pretrain::{pretrain, TrainConfig};

fn main() -> brepmae::Result<()> {
    let model = ModelConfig { dim: 32, heads: 4, ffn_hidden: 64, mpnn_hidden: 64, fold_hidden: 32, fold_code: 8, head_hidden: [64, 32], ..Default::default() };
    let manifest = plan_corpus(&CorpusConfig::uniform(8, [0.6, 0.1, 0.3], 5))?;
    let unlabeled = materialize(manifest.split(Split::Train))?;
    let val = materialize(manifest.split(Split::Val))?;
    let test = materialize(manifest.split(Split::Test))?;
    let test_graphs: Vec<&Gaag> = test.iter().map(|s| &s.graph).collect();

    let pre = TrainConfig { model: model.clone(), lr: 3e-4, batch_size: 4, epochs: 2, seed: 1, ..Default::default() };
    let (trainer, _) = pretrain::<f32>(&unlabeled, &pre, |_, _| {})?;

    let subset = Subset::Shots(2);
    let labeled = materialize(&few_shot_sample(&manifest, subset, 0)?)?;
    let config = FinetuneConfig { task: Task::Classification, subset, epochs: 5, lr_head: 1e-3, lr_encoder: 1e-4, batch_size: 4, model: model.clone(), ..Default::default() };
    println!("{} labeled models, {} test models", labeled.len(), test.len());
    for (name, source) in [("pre-trained", Some((&model, &trainer.store))), ("scratch", None)] {
        let out = finetune::<f32>(source, &labeled, &val, &config, |r| println!("  {name} epoch {} loss {:.4} val acc {:.3}", r.epoch, r.train_loss, r.val_acc))?;
        let report = out.model.evaluate(&out.store, &test_graphs)?;
        println!("{name}: best epoch {}, test accuracy {:.3}", out.best_epoch, report.accuracy);
    }
    Ok(())
}
