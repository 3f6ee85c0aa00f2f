//! Builds the attributed adjacency graph of one synthetic part and writes it as JSON.
//!
//! `cargo run --example extract_gaag -- [template] [seed]`

use brepmae::gaag::{build_gaag, to_json};
use brepmae::synth::{generate_model, Template};

fn main() -> brepmae::Result<()> {
    let mut args = std::env::args().skip(1);
    let template: Template = args.next().as_deref().unwrap_or("cyl_boss").parse()?;
    let seed = args.next().map_or(0, |s| s.parse().expect("seed is an integer"));
    let model = generate_model(template, seed)?;
    let g = build_gaag(&model)?;
    println!("{template} seed {seed}: {} faces, {} edges", g.n_faces, g.n_edges);
    for (f, a) in g.face_attrs.iter().enumerate() {
        let kind = a.type_onehot.iter().position(|&v| v == 1.0).unwrap_or(0);
        println!("  face {f:2} type {kind} area {:.4} label {:?}", a.area, g.face_labels.as_ref().map(|l| l[f]));
    }
    for &[i, j, e] in &g.adjacency {
        let c = g.edge_attrs[e].convexity;
        println!("  edge {e:2} joins {i}-{j} concave/convex/smooth {c:?} length {:.4}", g.edge_attrs[e].length);
    }
    let path = std::env::temp_dir().join(format!("{template}_{seed}.json"));
    std::fs::write(&path, to_json(&g)?).expect("write gAAG");
    println!("wrote {}", path.display());
    Ok(())
}
