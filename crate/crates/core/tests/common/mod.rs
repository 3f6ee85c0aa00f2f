#![allow(dead_code)]

use std::io::Write;

use brepmae::embed::ModelConfig;
use brepmae::gaag::{build_gaag, Gaag};
use brepmae::synth::{generate_model, Template};
use brepmae::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model small enough for exhaustive checks on one core.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 32,
        heads: 4,
        ffn_hidden: 48,
        mpnn_hidden: 40,
        fold_hidden: 24,
        fold_code: 8,
        head_hidden: [48, 32],
        ..Default::default()
    }
}

pub fn graph(template: Template, seed: u64) -> Gaag {
    build_gaag(&generate_model(template, seed).unwrap()).unwrap()
}

/// A box with three of its twelve edges dropped: 6 faces, 9 edges.
pub fn six_face_nine_edge() -> Gaag {
    let mut g = graph(Template::Box, 0);
    g.adjacency.retain(|t| t[2] < 9);
    g.edge_samples.truncate(9);
    g.edge_attrs.truncate(9);
    g.n_edges = 9;
    g.validate().unwrap();
    g
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One pass/fail line per criterion, then the assertion.
pub fn report(id: &str, ok: bool, detail: String) {
    // Straight to the handle so the line survives libtest output capture.
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id}: {} ({detail})", if ok { "PASS" } else { "FAIL" }).unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {id} failed: {detail}");
}
