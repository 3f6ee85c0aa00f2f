//! Batch packing, the five-branch BRep encoder and input-level masking.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaag::{Gaag, EDGE_ATTR_DIM, EDGE_POINT_DIM, EDGE_SAMPLES, FACE_ATTR_DIM, FACE_POINT_DIM, HIGH_RES, LOW_RES};
use crate::nn::{ConvNormRelu, Ctx, NormMlp, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{Mat, Real};

/// Network widths. The defaults are the full-size architecture; smaller values
/// are used for quick experiments and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub csma_blocks: usize,
    pub mpnn_layers: usize,
    pub mpnn_hidden: usize,
    pub fold_hidden: usize,
    pub fold_code: usize,
    pub head_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            heads: 8,
            ffn_hidden: 1024,
            dropout: 0.3,
            csma_blocks: 2,
            mpnn_layers: 2,
            mpnn_hidden: 512,
            fold_hidden: 512,
            fold_code: 64,
            head_hidden: [1024, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.dim % 32 != 0 {
            return Err(Error::Config(format!("dim {} must be divisible by 32 (GroupNorm groups)", self.dim)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Several graphs packed into row-stacked matrices. Face `f` of model `b` is
/// global face `face_off[b] + f`; grids are face-major, row-major.
#[derive(Clone, Debug)]
pub struct Batch<S: Real> {
    pub face_off: Vec<usize>,
    pub edge_off: Vec<usize>,
    pub grid_low: Mat<S>,
    pub grid_high: Mat<S>,
    pub face_attr: Mat<S>,
    pub edge_geom: Mat<S>,
    pub edge_attr: Mat<S>,
    /// Global `(face_i, face_j)` of every global edge.
    pub edge_faces: Vec<[usize; 2]>,
}

impl<S: Real> Batch<S> {
    pub fn new(graphs: &[&Gaag]) -> Self {
        let mut face_off = vec![0];
        let mut edge_off = vec![0];
        let (mut low, mut high, mut fa, mut eg, mut ea) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut edge_faces = Vec::new();
        for g in graphs {
            let f0 = *face_off.last().unwrap();
            for k in 0..g.n_faces {
                low.extend(g.face_grids_low[k].points.iter().flatten().map(|&x| S::of(x)));
                high.extend(g.face_grids_high[k].points.iter().flatten().map(|&x| S::of(x)));
                fa.extend(g.face_attrs[k].to_array().iter().map(|&x| S::of(x)));
            }
            for (k, faces) in g.edge_faces().into_iter().enumerate() {
                eg.extend(g.edge_samples[k].points.iter().flatten().map(|&x| S::of(x)));
                ea.extend(g.edge_attrs[k].to_array().iter().map(|&x| S::of(x)));
                edge_faces.push([f0 + faces[0], f0 + faces[1]]);
            }
            face_off.push(f0 + g.n_faces);
            edge_off.push(edge_off.last().unwrap() + g.n_edges);
        }
        let (nf, ne) = (*face_off.last().unwrap(), *edge_off.last().unwrap());
        Self {
            grid_low: Mat::from_vec(nf * LOW_RES * LOW_RES, FACE_POINT_DIM, low),
            grid_high: Mat::from_vec(nf * HIGH_RES * HIGH_RES, FACE_POINT_DIM, high),
            face_attr: Mat::from_vec(nf, FACE_ATTR_DIM, fa),
            edge_geom: Mat::from_vec(ne * EDGE_SAMPLES, EDGE_POINT_DIM, eg),
            edge_attr: Mat::from_vec(ne, EDGE_ATTR_DIM, ea),
            face_off,
            edge_off,
            edge_faces,
        }
    }

    pub fn n_models(&self) -> usize {
        self.face_off.len() - 1
    }

    pub fn n_faces(&self) -> usize {
        *self.face_off.last().unwrap()
    }

    pub fn n_edges(&self) -> usize {
        *self.edge_off.last().unwrap()
    }

    /// Model index of every global face.
    pub fn face_model(&self) -> Vec<usize> {
        segment_ids(&self.face_off)
    }

    pub fn edge_model(&self) -> Vec<usize> {
        segment_ids(&self.edge_off)
    }

    /// The listed faces and edges as a single edge-free pseudo-model, enough
    /// for the per-entity encoder.
    pub fn select(&self, faces: &[usize], edges: &[usize]) -> Self {
        let rows = |m: &Mat<S>, ids: &[usize], per: usize| {
            let idx: Vec<usize> = ids.iter().flat_map(|&i| i * per..(i + 1) * per).collect();
            m.gather_rows(&idx)
        };
        Self {
            face_off: vec![0, faces.len()],
            edge_off: vec![0, edges.len()],
            grid_low: rows(&self.grid_low, faces, LOW_RES * LOW_RES),
            grid_high: rows(&self.grid_high, faces, HIGH_RES * HIGH_RES),
            face_attr: rows(&self.face_attr, faces, 1),
            edge_geom: rows(&self.edge_geom, edges, EDGE_SAMPLES),
            edge_attr: rows(&self.edge_attr, edges, 1),
            edge_faces: Vec::new(),
        }
    }

    /// Copy with the raw inputs of masked entities zeroed.
    pub fn masked(&self, mask: &BatchMask) -> Self {
        let mut out = self.clone();
        let zero = |m: &mut Mat<S>, entity: usize, per: usize| {
            for r in entity * per..(entity + 1) * per {
                m.row_mut(r).iter_mut().for_each(|x| *x = S::zero());
            }
        };
        for (f, _) in mask.faces.iter().enumerate().filter(|(_, &m)| m) {
            zero(&mut out.grid_low, f, LOW_RES * LOW_RES);
            zero(&mut out.grid_high, f, HIGH_RES * HIGH_RES);
            zero(&mut out.face_attr, f, 1);
        }
        for (e, _) in mask.edges.iter().enumerate().filter(|(_, &m)| m) {
            zero(&mut out.edge_geom, e, EDGE_SAMPLES);
            zero(&mut out.edge_attr, e, 1);
        }
        out
    }
}

pub(crate) fn segment_ids(off: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(*off.last().unwrap());
    for s in 0..off.len() - 1 {
        ids.extend(std::iter::repeat_n(s, off[s + 1] - off[s]));
    }
    ids
}

/// Masked face and edge indices of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked_faces: Vec<usize>,
    pub masked_edges: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Uniform masks without replacement, `round(ratio * n)` entities each, always
/// leaving at least one face and (when there are edges) one edge visible.
pub fn make_mask(n_faces: usize, n_edges: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if n_faces == 0 {
        return Err(Error::Contract("cannot mask a model without faces".into()));
    }
    let count = |n: usize| ((ratio * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| {
        let mut v = sample(&mut rng, n, count(n)).into_vec();
        v.sort_unstable();
        v
    };
    let masked_faces = pick(n_faces);
    let masked_edges = pick(n_edges);
    Ok(MaskSpec { masked_faces, masked_edges, ratio, seed })
}

/// Per-entity mask flags over a packed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMask {
    pub faces: Vec<bool>,
    pub edges: Vec<bool>,
}

impl BatchMask {
    pub fn none<S: Real>(batch: &Batch<S>) -> Self {
        Self { faces: vec![false; batch.n_faces()], edges: vec![false; batch.n_edges()] }
    }

    pub fn from_specs<S: Real>(batch: &Batch<S>, specs: &[MaskSpec]) -> Result<Self> {
        assert_eq!(specs.len(), batch.n_models());
        let mut m = Self::none(batch);
        for (b, s) in specs.iter().enumerate() {
            let (f0, nf) = (batch.face_off[b], batch.face_off[b + 1] - batch.face_off[b]);
            let (e0, ne) = (batch.edge_off[b], batch.edge_off[b + 1] - batch.edge_off[b]);
            for &f in &s.masked_faces {
                if f >= nf {
                    return Err(Error::Contract(format!("masked face {f} out of range for {nf} faces")));
                }
                m.faces[f0 + f] = true;
            }
            for &e in &s.masked_edges {
                if e >= ne {
                    return Err(Error::Contract(format!("masked edge {e} out of range for {ne} edges")));
                }
                m.edges[e0 + e] = true;
            }
        }
        Ok(m)
    }
}

/// Node streams `f_low`, `f_high` and the edge stream `e`, one row per entity.
#[derive(Clone, Copy)]
pub struct FeatureBundle<'t, S: Real> {
    pub f_low: Var<'t, S>,
    pub f_high: Var<'t, S>,
    pub e: Var<'t, S>,
}

/// Conv stack for one grid resolution followed by global average pooling.
#[derive(Clone, Debug)]
struct GridCnn {
    layers: Vec<ConvNormRelu>,
}

impl GridCnn {
    fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, n: usize, h: usize, w: usize) -> Var<'t, S> {
        let mut y = x;
        for l in &self.layers {
            y = l.forward(ctx, y, n, h, w);
        }
        y.mean_rows(h * w)
    }
}

#[derive(Clone, Debug)]
pub struct BrepEncoder {
    dim: usize,
    face_cnn_low: GridCnn,
    face_cnn_high: GridCnn,
    face_attr: NormMlp,
    face_fusion: NormMlp,
    edge_cnn: GridCnn,
    edge_attr: NormMlp,
    edge_fusion: NormMlp,
}

const ATTR_WIDTH: usize = 128;

impl BrepEncoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let grid = |store: &mut ParamStore<S>, tag: &str, rng: &mut ChaCha8Rng| GridCnn {
            layers: vec![
                ConvNormRelu::new(store, &format!("{name}.{tag}.0"), FACE_POINT_DIM, 64, (3, 3), 8, rng),
                ConvNormRelu::new(store, &format!("{name}.{tag}.1"), 64, 128, (3, 3), 16, rng),
                ConvNormRelu::new(store, &format!("{name}.{tag}.2"), 128, d, (3, 3), 32, rng),
            ],
        };
        let face_cnn_low = grid(store, "face_cnn_low", rng);
        let face_cnn_high = grid(store, "face_cnn_high", rng);
        let face_attr = NormMlp::new(store, &format!("{name}.face_attr"), [FACE_ATTR_DIM, ATTR_WIDTH, ATTR_WIDTH], rng);
        let face_fusion = NormMlp::new(store, &format!("{name}.face_fusion"), [d + ATTR_WIDTH, d, d], rng);
        let edge_cnn = GridCnn {
            layers: vec![
                ConvNormRelu::new(store, &format!("{name}.edge_cnn.0"), EDGE_POINT_DIM, 64, (3, 1), 8, rng),
                ConvNormRelu::new(store, &format!("{name}.edge_cnn.1"), 64, d, (3, 1), 32, rng),
            ],
        };
        let edge_attr = NormMlp::new(store, &format!("{name}.edge_attr"), [EDGE_ATTR_DIM, ATTR_WIDTH, ATTR_WIDTH], rng);
        let edge_fusion = NormMlp::new(store, &format!("{name}.edge_fusion"), [d + ATTR_WIDTH, d, d], rng);
        Self { dim: d, face_cnn_low, face_cnn_high, face_attr, face_fusion, edge_cnn, edge_attr, edge_fusion }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, batch: &Batch<S>) -> FeatureBundle<'t, S> {
        let nf = batch.n_faces();
        let low = self.face_cnn_low.forward(ctx, ctx.constant(batch.grid_low.clone()), nf, LOW_RES, LOW_RES);
        let high = self.face_cnn_high.forward(ctx, ctx.constant(batch.grid_high.clone()), nf, HIGH_RES, HIGH_RES);
        let attr = self.face_attr.forward(ctx, ctx.constant(batch.face_attr.clone()));
        let f_low = self.face_fusion.forward(ctx, ctx.tape.concat_cols(&[low, attr]));
        let f_high = self.face_fusion.forward(ctx, ctx.tape.concat_cols(&[high, attr]));
        let ne = batch.n_edges();
        let e = if ne == 0 {
            ctx.constant(Mat::zeros(0, self.dim))
        } else {
            let geom = self.edge_cnn.forward(ctx, ctx.constant(batch.edge_geom.clone()), ne, EDGE_SAMPLES, 1);
            let attr = self.edge_attr.forward(ctx, ctx.constant(batch.edge_attr.clone()));
            self.edge_fusion.forward(ctx, ctx.tape.concat_cols(&[geom, attr]))
        };
        FeatureBundle { f_low, f_high, e }
    }
}

/// Learned replacement rows for masked entities, one per stream.
#[derive(Clone, Debug)]
pub struct MaskTokens {
    pub face_low: ParamId,
    pub face_high: ParamId,
    pub edge: ParamId,
}

impl MaskTokens {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            face_low: store.add_uniform(format!("{name}.face_low"), 1, dim, dim, rng),
            face_high: store.add_uniform(format!("{name}.face_high"), 1, dim, dim, rng),
            edge: store.add_uniform(format!("{name}.edge"), 1, dim, dim, rng),
        }
    }
}

/// Overwrites the rows of masked entities with the mask tokens.
pub fn apply_mask<'t, S: Real>(ctx: &Ctx<'t, '_, S>, bundle: FeatureBundle<'t, S>, mask: &BatchMask, tokens: &MaskTokens) -> Result<FeatureBundle<'t, S>> {
    if mask.faces.len() != bundle.f_high.rows() || mask.edges.len() != bundle.e.rows() {
        return Err(Error::Contract("mask does not match feature rows".into()));
    }
    let pick = |x: Var<'t, S>, token: ParamId, flags: &[bool]| {
        if flags.iter().any(|&m| m) {
            x.select_rows(ctx.p(token), Rc::new(flags.to_vec()))
        } else {
            x
        }
    };
    Ok(FeatureBundle {
        f_low: pick(bundle.f_low, tokens.face_low, &mask.faces),
        f_high: pick(bundle.f_high, tokens.face_high, &mask.faces),
        e: pick(bundle.e, tokens.edge, &mask.edges),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaag::build_gaag;
    use crate::synth::{generate_model, Template};
    use crate::tape::Tape;

    fn encoder() -> (ParamStore<f64>, BrepEncoder, MaskTokens) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig { dim: 64, heads: 4, ..Default::default() };
        let enc = BrepEncoder::new(&mut store, "embed", &cfg, &mut rng);
        let tok = MaskTokens::new(&mut store, "mask", 64, &mut rng);
        (store, enc, tok)
    }

    #[test]
    fn mask_counts_and_determinism() {
        let m = make_mask(10, 12, 0.7, 5).unwrap();
        assert_eq!((m.masked_faces.len(), m.masked_edges.len()), (7, 8));
        assert_eq!(m, make_mask(10, 12, 0.7, 5).unwrap());
        let z = make_mask(10, 12, 0.0, 5).unwrap();
        assert!(z.masked_faces.is_empty() && z.masked_edges.is_empty());
        assert_eq!(make_mask(4, 3, 1.0, 0).unwrap().masked_faces.len(), 3);
        assert!(matches!(make_mask(4, 3, 1.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_frequency_is_uniform() {
        let mut hits = [0usize; 10];
        let n = 10_000;
        for s in 0..n {
            for f in make_mask(10, 12, 0.7, s as u64).unwrap().masked_faces {
                hits[f] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / n as f64 - 0.7).abs() < 0.02);
        }
    }

    #[test]
    fn encoder_shapes_and_zero_input_rows() {
        let (store, enc, _) = encoder();
        let g = build_gaag(&generate_model(Template::Box, 1).unwrap()).unwrap();
        let batch = Batch::<f64>::new(&[&g]);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let b = enc.forward(&ctx, &batch);
        assert_eq!((b.f_low.shape(), b.f_high.shape(), b.e.shape()), ((6, 64), (6, 64), (12, 64)));

        let all = BatchMask { faces: vec![true; 6], edges: vec![true; 12] };
        let zeroed = batch.masked(&all);
        let z = enc.forward(&ctx, &zeroed).f_high.value();
        for r in 1..6 {
            assert_eq!(z.row(r), z.row(0));
        }
    }

    #[test]
    fn masked_rows_ignore_raw_input_and_unmasked_rows_are_untouched() {
        let (store, enc, tok) = encoder();
        let g1 = build_gaag(&generate_model(Template::BoxHole, 1).unwrap()).unwrap();
        let mut g2 = g1.clone();
        let spec = make_mask(g1.n_faces, g1.n_edges, 0.5, 3).unwrap();
        for &f in &spec.masked_faces {
            g2.face_grids_high[f].points[0][0] += 1.0;
            g2.face_attrs[f].area += 1.0;
        }
        for &e in &spec.masked_edges {
            g2.edge_samples[e].points[3][1] -= 0.5;
        }
        let run = |g: &Gaag| {
            let batch = Batch::<f64>::new(&[g]);
            let mask = BatchMask::from_specs(&batch, std::slice::from_ref(&spec)).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let b = apply_mask(&ctx, enc.forward(&ctx, &batch.masked(&mask)), &mask, &tok).unwrap();
            let twice = apply_mask(&ctx, b, &mask, &tok).unwrap();
            assert_eq!(*twice.f_high.value(), *b.f_high.value());
            ((*b.f_low.value()).clone(), (*b.f_high.value()).clone(), (*b.e.value()).clone())
        };
        let (a, b) = (run(&g1), run(&g2));
        assert_eq!(a, b);
        for &f in &spec.masked_faces {
            assert_eq!(a.1.row(f), store.get(tok.face_high).row(0));
        }
    }

    #[test]
    fn all_but_one_face_masked_leaves_one_visible_row() {
        let (store, enc, tok) = encoder();
        let g = build_gaag(&generate_model(Template::BoxSlot, 2).unwrap()).unwrap();
        let spec = make_mask(g.n_faces, g.n_edges, 1.0, 9).unwrap();
        let batch = Batch::<f64>::new(&[&g]);
        let mask = BatchMask::from_specs(&batch, &[spec]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let b = apply_mask(&ctx, enc.forward(&ctx, &batch.masked(&mask)), &mask, &tok).unwrap();
        let token = store.get(tok.face_high);
        let visible = (0..g.n_faces).filter(|&r| b.f_high.value().row(r) != token.row(0)).count();
        assert_eq!(visible, 1);
    }
}
