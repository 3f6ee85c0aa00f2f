//! Saves a model to a checkpoint, reloads it into a differently seeded model
//! and checks that a probe forward pass is bit-identical.

use brepmae::checkpoint::{Checkpoint, CheckpointKind, RngState};
use brepmae::embed::{Batch, BatchMask, ModelConfig};
use brepmae::gaag::build_gaag;
use brepmae::nn::{Ctx, ParamStore};
use brepmae::pretrain::MaskedAutoencoder;
use brepmae::synth::{generate_model, Template};
use brepmae::tape::Tape;

fn probe(model: &MaskedAutoencoder, store: &ParamStore<f32>, batch: &Batch<f32>) -> brepmae::Result<Vec<f32>> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, store);
    Ok(model.reconstruct(&ctx, batch, &BatchMask::none(batch))?.face_geom.value().data().to_vec())
}

fn main() -> brepmae::Result<()> {
    let cfg = ModelConfig { dim: 32, heads: 4, ..Default::default() };
    let mut store = ParamStore::<f32>::new();
    let model = MaskedAutoencoder::new(&mut store, &cfg, 1);
    let path = std::env::temp_dir().join("brepmae_example.ckpt");
    let config = serde_json::to_value(&cfg).expect("config serializes");
    Checkpoint::from_store(CheckpointKind::Pretrain, config, None, RngState { seed: 1, step: 0 }, &store).save(&path)?;

    let mut other = ParamStore::<f32>::new();
    let reloaded = MaskedAutoencoder::new(&mut other, &cfg, 2);
    let ckpt = Checkpoint::load(&path)?;
    ckpt.restore(&mut other)?;
    println!("{} tensors, {} scalars, format v{}", ckpt.tensors.len(), other.num_scalars(), ckpt.header.format_version);

    let g = build_gaag(&generate_model(Template::BoxStep, 0)?)?;
    let batch = Batch::<f32>::new(&[&g]);
    let same = probe(&model, &store, &batch)? == probe(&reloaded, &other, &batch)?;
    println!("probe outputs bit-identical: {same}");
    Ok(())
}
