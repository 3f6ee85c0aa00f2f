//! Generates a small synthetic corpus on disk and summarizes its manifest.
//!
//! `cargo run --example generate_corpus -- [out_dir]`

use std::path::PathBuf;

use brepmae::corpus::{generate_corpus, CorpusConfig, Split};
use brepmae::synth::Template;

fn main() -> brepmae::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("brepmae_corpus"));
    let manifest = generate_corpus(&CorpusConfig::uniform(4, [0.7, 0.15, 0.15], 7), &out)?;
    println!("{} models under {}", manifest.entries.len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:>5}: {}", manifest.split(split).count());
    }
    for t in Template::ALL {
        let n = manifest.entries.iter().filter(|e| e.template == t).count();
        println!("{:<10} shape class {} x{n}", t.name(), t.shape_class().id());
    }
    println!("manifest sha256 {}", manifest.hash());
    Ok(())
}
