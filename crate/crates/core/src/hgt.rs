//! Graph encoder: cross-scale mutual attention blocks followed by
//! edge-conditioned message passing.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::embed::{Batch, FeatureBundle, ModelConfig};
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{Mat, Real};

/// Connectivity of a packed batch, with every stored edge expanded into two
/// directed edges: direction `d < E` runs `i -> j`, direction `E + d` runs `j -> i`.
#[derive(Clone, Debug)]
pub struct Topology {
    pub face_off: Vec<usize>,
    pub edge_off: Vec<usize>,
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub edge_of_dir: Rc<Vec<usize>>,
}

impl Topology {
    pub fn of<S: Real>(batch: &Batch<S>) -> Self {
        let ne = batch.n_edges();
        let mut src = Vec::with_capacity(2 * ne);
        let mut dst = Vec::with_capacity(2 * ne);
        for flip in [false, true] {
            for &[i, j] in &batch.edge_faces {
                let (a, b) = if flip { (j, i) } else { (i, j) };
                src.push(a);
                dst.push(b);
            }
        }
        let edge_of_dir = (0..ne).chain(0..ne).collect();
        Self {
            face_off: batch.face_off.clone(),
            edge_off: batch.edge_off.clone(),
            src: Rc::new(src),
            dst: Rc::new(dst),
            edge_of_dir: Rc::new(edge_of_dir),
        }
    }

    pub fn n_faces(&self) -> usize {
        *self.face_off.last().unwrap()
    }

    pub fn n_edges(&self) -> usize {
        *self.edge_off.last().unwrap()
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dropout: f64,
}

impl MultiHeadAttention {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads: cfg.heads,
            dropout: cfg.dropout,
        }
    }

    /// Rows of query segment `s` attend to key segment `s` only.
    pub fn forward<'t, S: Real>(
        &self,
        ctx: &Ctx<'t, '_, S>,
        x_q: Var<'t, S>,
        x_kv: Var<'t, S>,
        q_off: &[usize],
        kv_off: &[usize],
    ) -> Var<'t, S> {
        let (q, k, v) = (self.q.forward(ctx, x_q), self.k.forward(ctx, x_kv), self.v.forward(ctx, x_kv));
        let a = if ctx.is_training() && self.dropout > 0.0 {
            let mut rng = ctx.rng();
            ctx.tape.attention(q, k, v, self.heads, q_off, kv_off, Some((self.dropout, &mut *rng)))
        } else {
            ctx.tape.attention(q, k, v, self.heads, q_off, kv_off, None)
        };
        self.o.forward(ctx, a)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    mha: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    dropout: f64,
}

impl SelfAttention {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), cfg, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.dim, cfg.ffn_hidden, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_hidden, cfg.dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, off: &[usize]) -> Var<'t, S> {
        let a = ctx.dropout(self.mha.forward(ctx, x, x, off, off), self.dropout);
        let x = self.ln1.forward(ctx, x.add(a));
        let h = ctx.dropout(self.ff1.forward(ctx, x).gelu(), self.dropout);
        let f = ctx.dropout(self.ff2.forward(ctx, h), self.dropout);
        self.ln2.forward(ctx, x.add(f))
    }
}

/// Cross attention; queries of a model with no keys pass through unchanged.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    mha: MultiHeadAttention,
}

impl CrossAttention {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self { mha: MultiHeadAttention::new(store, &format!("{name}.mha"), cfg, rng) }
    }

    pub fn forward<'t, S: Real>(
        &self,
        ctx: &Ctx<'t, '_, S>,
        x_q: Var<'t, S>,
        x_kv: Var<'t, S>,
        q_off: &[usize],
        kv_off: &[usize],
    ) -> Var<'t, S> {
        let mut keep = vec![false; x_q.rows()];
        for s in 0..q_off.len() - 1 {
            if kv_off[s + 1] == kv_off[s] {
                keep[q_off[s]..q_off[s + 1]].iter_mut().for_each(|k| *k = true);
            }
        }
        if keep.iter().all(|&k| k) {
            return x_q;
        }
        let y = self.mha.forward(ctx, x_q, x_kv, q_off, kv_off);
        if keep.iter().any(|&k| k) {
            y.select_rows(x_q, Rc::new(keep))
        } else {
            y
        }
    }
}

/// One cross-scale mutual attention block:
/// `f_low' = SA(CA(f_low, f_high))`, `f_high' = CA(CA(f_high, f_low'), e)`.
#[derive(Clone, Debug)]
pub struct Csma {
    low_from_high: CrossAttention,
    low_self: SelfAttention,
    high_from_low: CrossAttention,
    high_from_edges: CrossAttention,
}

impl Csma {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            low_from_high: CrossAttention::new(store, &format!("{name}.low_from_high"), cfg, rng),
            low_self: SelfAttention::new(store, &format!("{name}.low_self"), cfg, rng),
            high_from_low: CrossAttention::new(store, &format!("{name}.high_from_low"), cfg, rng),
            high_from_edges: CrossAttention::new(store, &format!("{name}.high_from_edges"), cfg, rng),
        }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: FeatureBundle<'t, S>, topo: &Topology) -> FeatureBundle<'t, S> {
        let fo = &topo.face_off;
        let low = self.low_from_high.forward(ctx, x.f_low, x.f_high, fo, fo);
        let low = self.low_self.forward(ctx, low, fo);
        let high = self.high_from_low.forward(ctx, x.f_high, low, fo, fo);
        let high = self.high_from_edges.forward(ctx, high, x.e, fo, &topo.edge_off);
        FeatureBundle { f_low: low, f_high: high, e: x.e }
    }
}

/// Node and edge features after (or during) message passing.
#[derive(Clone, Copy)]
pub struct GraphFeatures<'t, S: Real> {
    pub f: Var<'t, S>,
    pub e: Var<'t, S>,
}

/// Edge-conditioned attention message passing with an edge update.
#[derive(Clone, Debug)]
pub struct MpnnLayer {
    edge_fc1: Linear,
    edge_fc2: Linear,
    score_dst: ParamId,
    score_src: ParamId,
    score_edge: ParamId,
    value: Linear,
    ffn1: Linear,
    ffn2: Linear,
    ln: LayerNorm,
    dim: usize,
}

pub const ATTENTION_SLOPE: f64 = 0.2;

impl MpnnLayer {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        Self {
            edge_fc1: Linear::new(store, &format!("{name}.edge_fc1"), 3 * d, d, rng),
            edge_fc2: Linear::new(store, &format!("{name}.edge_fc2"), d, d, rng),
            score_dst: store.add_uniform(format!("{name}.score_dst"), d, 1, d, rng),
            score_src: store.add_uniform(format!("{name}.score_src"), d, 1, d, rng),
            score_edge: store.add_uniform(format!("{name}.score_edge"), d, 1, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), d, cfg.mpnn_hidden, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), cfg.mpnn_hidden, d, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            dim: d,
        }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: GraphFeatures<'t, S>, topo: &Topology) -> GraphFeatures<'t, S> {
        let (nf, ne) = (topo.n_faces(), topo.n_edges());
        let (message, e_new) = if ne == 0 {
            (ctx.constant(Mat::zeros(nf, self.dim)), x.e)
        } else {
            let f_src = x.f.gather_rows(topo.src.clone());
            let f_dst = x.f.gather_rows(topo.dst.clone());
            let e_dir = x.e.gather_rows(topo.edge_of_dir.clone());
            let h = self.edge_fc1.forward(ctx, ctx.tape.concat_cols(&[f_src, f_dst, e_dir])).relu();
            let e_upd = self.edge_fc2.forward(ctx, h);

            let s_dst = x.f.matmul(ctx.p(self.score_dst)).gather_rows(topo.dst.clone());
            let s_src = x.f.matmul(ctx.p(self.score_src)).gather_rows(topo.src.clone());
            let s_edge = e_upd.matmul(ctx.p(self.score_edge));
            let alpha = s_dst.add(s_src).add(s_edge).leaky_relu(ATTENTION_SLOPE).segment_softmax(topo.dst.clone(), nf);

            let v = self.value.forward(ctx, x.f).gather_rows(topo.src.clone()).add(e_upd);
            let message = v.mul_col(alpha).scatter_add_rows(topo.dst.clone(), nf);
            let e_new = e_upd.slice_rows(0, ne);
            (message, e_new)
        };
        let upd = self.ffn2.forward(ctx, self.ffn1.forward(ctx, message).gelu());
        GraphFeatures { f: self.ln.forward(ctx, x.f.add(upd)), e: e_new }
    }
}

/// Stack of CSMA blocks and MPNN layers producing the latent node and edge features.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    csma: Vec<Csma>,
    mpnn: Vec<MpnnLayer>,
}

impl GraphEncoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            csma: (0..cfg.csma_blocks).map(|i| Csma::new(store, &format!("{name}.csma{i}"), cfg, rng)).collect(),
            mpnn: (0..cfg.mpnn_layers).map(|i| MpnnLayer::new(store, &format!("{name}.mpnn{i}"), cfg, rng)).collect(),
        }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: FeatureBundle<'t, S>, topo: &Topology) -> GraphFeatures<'t, S> {
        let mut b = x;
        for block in &self.csma {
            b = block.forward(ctx, b, topo);
        }
        run_mpnn(ctx, &self.mpnn, GraphFeatures { f: b.f_high, e: b.e }, topo)
    }
}

pub(crate) fn run_mpnn<'t, S: Real>(ctx: &Ctx<'t, '_, S>, layers: &[MpnnLayer], x: GraphFeatures<'t, S>, topo: &Topology) -> GraphFeatures<'t, S> {
    layers.iter().fold(x, |acc, l| l.forward(ctx, acc, topo))
}
