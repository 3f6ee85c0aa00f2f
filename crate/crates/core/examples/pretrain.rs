//! Masked-autoencoder pre-training on a handful of generated parts.
//!
//! `cargo run --release --example pretrain -- [steps]`

use brepmae::corpus::{materialize, plan_corpus, CorpusConfig};
use brepmae::embed::ModelConfig;
use brepmae::pretrain::{loss_csv, pretrain, TrainConfig};

fn main() -> brepmae::Result<()> {
    let steps = std::env::args().nth(1).map_or(60, |s| s.parse().expect("steps is an integer"));
    let manifest = plan_corpus(&CorpusConfig::uniform(2, [1.0, 0.0, 0.0], 1))?;
    let train = materialize(&manifest.entries)?;
    let config = TrainConfig {
        model: ModelConfig { dim: 64, heads: 4, ffn_hidden: 128, mpnn_hidden: 128, fold_hidden: 64, fold_code: 16, dropout: 0.0, ..Default::default() },
        lr: 3e-4,
        batch_size: 2,
        epochs: 1000,
        max_steps: Some(steps),
        seed: 3,
        ..Default::default()
    };
    let (trainer, history) = pretrain::<f32>(&train, &config, |step, r| {
        if step % 10 == 0 {
            println!("step {step:4} total {:.4} feat {:.4} face_geom {:.4} face_attr {:.4} edge_geom {:.4} edge_attr {:.4}", r.total, r.feat, r.face_geom, r.face_attr, r.edge_geom, r.edge_attr);
        }
    })?;
    println!("{} steps, {} parameters", trainer.steps_done(), trainer.store.num_scalars());
    let csv = loss_csv(&history, &serde_json::to_string(&config).expect("config serializes"));
    println!("{}", csv.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}
