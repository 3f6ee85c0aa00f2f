//! Parameters, forward contexts, basic layers and the optimizer.

use std::cell::{RefCell, RefMut};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{ConvGeom, Grads, Tape, Var};
use crate::tensor::{Mat, Real};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Mat<S>,
}

/// Named parameter tensors. Names are dotted module paths (`embed.face_cnn_high.conv0.w`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<S> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| S::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }
}

/// Which parameters a forward pass may differentiate.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    None,
    /// Parameters whose name starts with one of these prefixes are frozen.
    FreezePrefixes(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::FreezePrefixes(p) => !p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

/// State shared by every layer during one forward pass.
pub struct Ctx<'t, 's, S: Real> {
    pub tape: &'t Tape<S>,
    store: &'s ParamStore<S>,
    leaves: RefCell<Vec<Option<Var<'t, S>>>>,
    trainable: Trainable,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t, 's, S: Real> Ctx<'t, 's, S> {
    /// Evaluation-mode context (dropout disabled).
    pub fn eval(tape: &'t Tape<S>, store: &'s ParamStore<S>) -> Self {
        Self::new(tape, store, false, Trainable::All, 0)
    }

    pub fn new(tape: &'t Tape<S>, store: &'s ParamStore<S>, train: bool, trainable: Trainable, seed: u64) -> Self {
        Self {
            tape,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
            trainable,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<S> {
        self.store
    }

    /// The tape leaf of a parameter; one leaf per parameter per pass.
    pub fn p(&self, id: ParamId) -> Var<'t, S> {
        if let Some(v) = self.leaves.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable.allows(self.store.name(id)) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.leaves.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, m: Mat<S>) -> Var<'t, S> {
        self.tape.constant(m)
    }

    pub fn rng(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    /// Dropout that is active only in training mode.
    pub fn dropout(&self, x: Var<'t, S>, rate: f64) -> Var<'t, S> {
        if !self.train || rate <= 0.0 {
            return x;
        }
        x.dropout(rate, &mut *self.rng.borrow_mut())
    }

    /// Gradients of every parameter that took part in this pass, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &mut Grads<S>) -> Vec<Option<Mat<S>>> {
        self.leaves.borrow().iter().map(|leaf| leaf.and_then(|v| grads.take(v))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), in_dim, out_dim, in_dim, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, out_dim, in_dim, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.matmul(ctx.p(self.w)).add_bias(ctx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, dim, S::one()));
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.norm(ctx.p(self.gamma), ctx.p(self.beta), 1, 1, NORM_EPS)
    }
}

/// `Linear -> LayerNorm -> GELU -> Linear`, the shape shared by the attribute,
/// fusion and attribute-decoder MLPs.
#[derive(Clone, Debug)]
pub struct NormMlp {
    pub fc1: Linear,
    pub ln: LayerNorm,
    pub fc2: Linear,
}

impl NormMlp {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), dims[1]),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>) -> Var<'t, S> {
        let h = self.ln.forward(ctx, self.fc1.forward(ctx, x)).gelu();
        self.fc2.forward(ctx, h)
    }
}

/// Same-padded convolution followed by GroupNorm and ReLU, on channels-last rows.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Linear,
    pub norm: LayerNorm,
    pub groups: usize,
    pub kernel: (usize, usize),
}

impl ConvNormRelu {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let conv = Linear::new(store, &format!("{name}.conv"), fan_in, cout, rng);
        let norm = LayerNorm::new(store, &format!("{name}.gn"), cout);
        Self { conv, norm, groups, kernel }
    }

    /// `x` holds `batch` images of `height x width` pixels, one row per pixel.
    pub fn forward<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, x: Var<'t, S>, batch: usize, height: usize, width: usize) -> Var<'t, S> {
        let geom = ConvGeom { batch, height, width, kh: self.kernel.0, kw: self.kernel.1 };
        let y = self.conv.forward(ctx, x.im2col(geom));
        y.norm(ctx.p(self.norm.gamma), ctx.p(self.norm.beta), height * width, self.groups, NORM_EPS).relu()
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW<S> {
    cfg: AdamWConfig,
    m: Vec<Option<Mat<S>>>,
    v: Vec<Option<Mat<S>>>,
    t: u64,
}

impl<S: Real> AdamW<S> {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self { cfg, m: vec![None; n_params], v: vec![None; n_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `lr(id)` gives the learning rate of each parameter.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Mat<S>>], lr: impl Fn(ParamId) -> f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id.0).and_then(Option::as_ref) else { continue };
            let rate = lr(id);
            let p = store.get_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
            let decay = S::of(1.0 - rate * c.weight_decay);
            let (s1, s2) = (S::of(rate / bc1), S::of(1.0 / bc2));
            let eps = S::of(c.eps);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (S::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (S::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let pi = p.data()[i] * decay;
                p.data_mut()[i] = pi - s1 * mi / ((vi * s2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-15);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Mat::from_f64(1, 2, &[3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, 1);
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * x);
            opt.step(&mut store, &[Some(g)], |_| 0.01);
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn frozen_prefix_yields_constant_leaves() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("enc.a", Mat::filled(1, 1, 1.0));
        let b = store.add("head.b", Mat::filled(1, 1, 2.0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, Trainable::FreezePrefixes(vec!["enc.".into()]), 0);
        let y = ctx.p(a).mul(ctx.p(b)).sum_all();
        let mut g = tape.backward(y);
        let grads = ctx.param_grads(&mut g);
        assert!(grads[0].is_none());
        assert_eq!(grads[1].as_ref().unwrap().data(), &[1.0]);
    }
}
