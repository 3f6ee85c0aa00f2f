//! ASCII point-cloud exports of a reconstruction: original, masked input,
//! decoder output and per-point error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::embed::{Batch, BatchMask, MaskSpec};
use crate::error::{Error, Result};
use crate::gaag::{Gaag, HIGH_RES};
use crate::nn::{Ctx, ParamStore};
use crate::pretrain::MaskedAutoencoder;
use crate::tape::Tape;
use crate::tensor::{Mat, Real};

const FACE_POINTS: usize = HIGH_RES * HIGH_RES;

#[derive(Clone, Debug, PartialEq)]
pub struct ExportPaths {
    pub original: PathBuf,
    pub masked: PathBuf,
    pub reconstructed: PathBuf,
    pub error: PathBuf,
}

/// Decoder output for one model: `HIGH_RES^2` rows per face with
/// `x y z nx ny nz tau`, where `tau` is a probability.
pub fn reconstruct_points<S: Real>(model: &MaskedAutoencoder, store: &ParamStore<S>, g: &Gaag, mask: &MaskSpec) -> Result<Mat<f64>> {
    let batch = Batch::<S>::new(&[g]);
    let flags = BatchMask::from_specs(&batch, std::slice::from_ref(mask))?;
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, store);
    let mut out: Mat<f64> = model.reconstruct(&ctx, &batch, &flags)?.face_geom.value().cast();
    for r in 0..out.rows() {
        let logit = out.get(r, 6);
        out.set(r, 6, 1.0 / (1.0 + (-logit).exp()));
    }
    Ok(out)
}

/// Ground-truth grid points of every face, face-major.
pub fn original_points(g: &Gaag) -> Mat<f64> {
    let rows: Vec<Vec<f64>> = g.face_grids_high.iter().flat_map(|f| f.points.iter().map(|p| p.to_vec())).collect();
    Mat::from_rows(&rows)
}

fn header(config_json: &str, columns: &str) -> String {
    format!("# config={config_json}\n# {columns}\n")
}

fn row_text(out: &mut String, row: &[f64]) {
    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    out.push_str(&cells.join(" "));
    out.push('\n');
}

/// Writes `<stem>_original.xyz`, `<stem>_masked.xyz` (extra 0/1 masked-face
/// column), `<stem>_recon.xyz` and `<stem>_error.txt` (coordinate L2 error per point).
pub fn export_reconstruction<S: Real>(
    model: &MaskedAutoencoder,
    store: &ParamStore<S>,
    g: &Gaag,
    mask: &MaskSpec,
    dir: &Path,
    stem: &str,
    config_json: &str,
) -> Result<ExportPaths> {
    let original = original_points(g);
    let recon = reconstruct_points(model, store, g, mask)?;
    let mut masked_face = vec![false; g.n_faces];
    for &f in &mask.masked_faces {
        masked_face[f] = true;
    }
    let cols = "x y z nx ny nz tau";
    let (mut o, mut m, mut r, mut e) = (
        header(config_json, cols),
        header(config_json, &format!("{cols} masked")),
        header(config_json, cols),
        header(config_json, "l2_error"),
    );
    for row in 0..original.rows() {
        row_text(&mut o, original.row(row));
        let flag = if masked_face[row / FACE_POINTS] { 1.0 } else { 0.0 };
        row_text(&mut m, &[original.row(row), &[flag]].concat());
        row_text(&mut r, recon.row(row));
        let err: f64 = (0..3).map(|k| (recon.get(row, k) - original.get(row, k)).powi(2)).sum::<f64>().sqrt();
        let _ = writeln!(e, "{err}");
    }
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let paths = ExportPaths {
        original: dir.join(format!("{stem}_original.xyz")),
        masked: dir.join(format!("{stem}_masked.xyz")),
        reconstructed: dir.join(format!("{stem}_recon.xyz")),
        error: dir.join(format!("{stem}_error.txt")),
    };
    for (path, text) in [(&paths.original, o), (&paths.masked, m), (&paths.reconstructed, r), (&paths.error, e)] {
        fs::write(path, text).map_err(|err| Error::io(path, err))?;
    }
    Ok(paths)
}

/// Mean coordinate L2 error of `points` against the ground truth, and of the
/// constant predictor at `mean`, over the faces in `faces`.
pub fn coordinate_errors(g: &Gaag, points: &Mat<f64>, faces: &[usize], mean: [f64; 3]) -> (f64, f64) {
    let (mut model, mut baseline, mut n) = (0.0, 0.0, 0usize);
    for &f in faces {
        for (k, p) in g.face_grids_high[f].points.iter().enumerate() {
            let row = points.row(f * FACE_POINTS + k);
            model += (0..3).map(|c| (row[c] - p[c]).powi(2)).sum::<f64>().sqrt();
            baseline += (0..3).map(|c| (mean[c] - p[c]).powi(2)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    (model / n.max(1) as f64, baseline / n.max(1) as f64)
}

/// Centroid of all grid points of the given graphs.
pub fn mean_point(graphs: &[&Gaag]) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for g in graphs {
        for f in &g.face_grids_high {
            for p in &f.points {
                for c in 0..3 {
                    s[c] += p[c];
                }
                n += 1;
            }
        }
    }
    s.map(|v| v / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{make_mask, ModelConfig};
    use crate::gaag::build_gaag;
    use crate::synth::{generate_model, Template};

    #[test]
    fn unmasked_export_matches_original_modulo_flag() {
        let cfg = ModelConfig { dim: 32, heads: 4, ffn_hidden: 32, mpnn_hidden: 32, fold_hidden: 16, fold_code: 8, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let model = MaskedAutoencoder::new(&mut store, &cfg, 0);
        let g = build_gaag(&generate_model(Template::Box, 0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let none = make_mask(g.n_faces, g.n_edges, 0.0, 0).unwrap();
        let p = export_reconstruction(&model, &store, &g, &none, dir.path(), "box", "{}").unwrap();
        let body = |path: &PathBuf| -> Vec<String> { fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect() };
        let (o, m) = (body(&p.original), body(&p.masked));
        assert_eq!(o.len(), 169 * g.n_faces);
        assert_eq!(body(&p.reconstructed).len(), o.len());
        assert_eq!(body(&p.error).len(), o.len());
        for (a, b) in o.iter().zip(&m) {
            assert_eq!(format!("{a} 0"), *b);
        }
    }
}
