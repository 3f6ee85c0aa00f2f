//! Reconstruction decoder: graph decoder, folding branches for sampled
//! geometry and attribute heads.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::embed::ModelConfig;
use crate::gaag::{EDGE_ATTR_DIM, EDGE_POINT_DIM, EDGE_SAMPLES, FACE_ATTR_DIM, FACE_POINT_DIM, HIGH_RES};
use crate::hgt::{run_mpnn, GraphFeatures, MpnnLayer, Topology};
use crate::nn::{Ctx, Linear, NormMlp, ParamStore};
use crate::tape::Var;
use crate::tensor::{Mat, Real};

/// Canonical parameter lattice on [0, 1]^k, row-major.
pub fn lattice<S: Real>(per_axis: usize, axes: usize) -> Mat<S> {
    let step = 1.0 / (per_axis - 1) as f64;
    match axes {
        1 => Mat::from_vec(per_axis, 1, (0..per_axis).map(|k| S::of(k as f64 * step)).collect()),
        2 => {
            let mut v = Vec::with_capacity(per_axis * per_axis * 2);
            for r in 0..per_axis {
                for c in 0..per_axis {
                    v.push(S::of(r as f64 * step));
                    v.push(S::of(c as f64 * step));
                }
            }
            Mat::from_vec(per_axis * per_axis, 2, v)
        }
        _ => panic!("lattice of {axes} axes"),
    }
}

/// Two-stage folding MLP mapping a feature plus a lattice coordinate to a
/// sampled point. The first layer of each stage is applied split, so the
/// per-entity part is computed once.
#[derive(Clone, Debug)]
pub struct FoldingNet {
    per_axis: usize,
    axes: usize,
    dim: usize,
    code: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
    l4: Linear,
    l5: Linear,
    l6: Linear,
}

impl FoldingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, per_axis: usize, axes: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, h, code) = (cfg.dim, cfg.fold_hidden, cfg.fold_code);
        Self {
            per_axis,
            axes,
            dim: d,
            code,
            l1: Linear::new(store, &format!("{name}.l1"), d + axes, h, rng),
            l2: Linear::new(store, &format!("{name}.l2"), h, h, rng),
            l3: Linear::new(store, &format!("{name}.l3"), h, code, rng),
            l4: Linear::new(store, &format!("{name}.l4"), d + code, h, rng),
            l5: Linear::new(store, &format!("{name}.l5"), h, h, rng),
            l6: Linear::new(store, &format!("{name}.l6"), h, out, rng),
        }
    }

    pub fn points(&self) -> usize {
        self.per_axis.pow(self.axes as u32)
    }

    /// `feats` is `n x dim`; the result has `n * points()` rows, entity-major.
    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, feats: Var<'t, S>) -> Var<'t, S> {
        let (n, p) = (feats.rows(), self.points());
        if n == 0 {
            return ctx.constant(Mat::zeros(0, self.l6.out_dim));
        }
        let owner = Rc::new((0..n).flat_map(|i| std::iter::repeat_n(i, p)).collect::<Vec<_>>());
        let point = Rc::new((0..n).flat_map(|_| 0..p).collect::<Vec<_>>());
        let grid = ctx.constant(lattice(self.per_axis, self.axes));

        let w1 = ctx.p(self.l1.w);
        let per_entity = feats.matmul(w1.slice_rows(0, self.dim)).gather_rows(owner.clone());
        let per_point = grid.matmul(w1.slice_rows(self.dim, self.dim + self.axes)).gather_rows(point);
        let h = per_entity.add(per_point).add_bias(ctx.p(self.l1.b)).relu();
        let h = self.l2.forward(ctx, h).relu();
        let folded = self.l3.forward(ctx, h);

        let w4 = ctx.p(self.l4.w);
        let per_entity = feats.matmul(w4.slice_rows(0, self.dim)).gather_rows(owner);
        let h = per_entity.add(folded.matmul(w4.slice_rows(self.dim, self.dim + self.code))).add_bias(ctx.p(self.l4.b)).relu();
        let h = self.l5.forward(ctx, h).relu();
        self.l6.forward(ctx, h)
    }
}

/// Decoder outputs for a packed batch. `face_geom` rows are face-major
/// `HIGH_RES x HIGH_RES` grids; the last column holds trimming-mask logits.
#[derive(Clone, Copy)]
pub struct Reconstruction<'t, S: Real> {
    pub face_feat: Var<'t, S>,
    pub edge_feat: Var<'t, S>,
    pub face_geom: Var<'t, S>,
    pub face_attr: Var<'t, S>,
    pub edge_geom: Var<'t, S>,
    pub edge_attr: Var<'t, S>,
}

#[derive(Clone, Debug)]
pub struct BrepDecoder {
    graph: Vec<MpnnLayer>,
    face_fold: FoldingNet,
    edge_fold: FoldingNet,
    face_attr: NormMlp,
    edge_attr: NormMlp,
}

impl BrepDecoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        Self {
            graph: (0..cfg.mpnn_layers).map(|i| MpnnLayer::new(store, &format!("{name}.mpnn{i}"), cfg, rng)).collect(),
            face_fold: FoldingNet::new(store, &format!("{name}.face_fold"), cfg, HIGH_RES, 2, FACE_POINT_DIM, rng),
            edge_fold: FoldingNet::new(store, &format!("{name}.edge_fold"), cfg, EDGE_SAMPLES, 1, EDGE_POINT_DIM, rng),
            face_attr: NormMlp::new(store, &format!("{name}.face_attr"), [d, d, FACE_ATTR_DIM], rng),
            edge_attr: NormMlp::new(store, &format!("{name}.edge_attr"), [d, d, EDGE_ATTR_DIM], rng),
        }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, latent: GraphFeatures<'t, S>, topo: &Topology) -> Reconstruction<'t, S> {
        let g = run_mpnn(ctx, &self.graph, latent, topo);
        let edge_attr = if g.e.rows() == 0 { ctx.constant(Mat::zeros(0, EDGE_ATTR_DIM)) } else { self.edge_attr.forward(ctx, g.e) };
        Reconstruction {
            face_feat: g.f,
            edge_feat: g.e,
            face_geom: self.face_fold.forward(ctx, g.f),
            face_attr: self.face_attr.forward(ctx, g.f),
            edge_geom: self.edge_fold.forward(ctx, g.e),
            edge_attr,
        }
    }
}
