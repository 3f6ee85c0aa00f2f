//! Random entity masking and the encoder's view of a masked model.

use brepmae::embed::{apply_mask, make_mask, Batch, BatchMask, BrepEncoder, MaskTokens, ModelConfig};
use brepmae::gaag::build_gaag;
use brepmae::nn::{Ctx, ParamStore};
use brepmae::synth::{generate_model, Template};
use brepmae::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> brepmae::Result<()> {
    let g = build_gaag(&generate_model(Template::BoxSlot, 3)?)?;
    let spec = make_mask(g.n_faces, g.n_edges, 0.7, 42)?;
    println!("{} faces, masked {:?}", g.n_faces, spec.masked_faces);
    println!("{} edges, masked {:?}", g.n_edges, spec.masked_edges);

    let cfg = ModelConfig { dim: 64, heads: 4, ..Default::default() };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = BrepEncoder::new(&mut store, "embed", &cfg, &mut rng);
    let tokens = MaskTokens::new(&mut store, "mask_token", cfg.dim, &mut rng);

    let batch = Batch::<f32>::new(&[&g]);
    let mask = BatchMask::from_specs(&batch, std::slice::from_ref(&spec))?;
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let visible = encoder.forward(&ctx, &batch.masked(&mask));
    let masked = apply_mask(&ctx, visible, &mask, &tokens)?;
    let high = masked.f_high.value();
    for f in 0..g.n_faces {
        let norm: f32 = high.row(f).iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("face {f:2} {} |f_high| {norm:.3}", if mask.faces[f] { "token " } else { "visible" });
    }
    Ok(())
}
