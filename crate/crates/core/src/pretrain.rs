//! Masked pre-training: target construction, the five-term reconstruction
//! loss and the optimization loop.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, Sample};
use crate::decoder::{BrepDecoder, Reconstruction};
use crate::embed::{apply_mask, make_mask, Batch, BatchMask, BrepEncoder, FeatureBundle, MaskSpec, MaskTokens, ModelConfig};
use crate::error::{Error, Result};
use crate::gaag::{Gaag, EDGE_SAMPLES, HIGH_RES};
use crate::hgt::{GraphEncoder, Topology};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Ctx, ParamStore, Trainable};
use crate::tape::{Tape, Var};
use crate::tensor::{Mat, Real};

pub const BCE_EPS: f64 = 1e-7;
const FACE_POINTS: usize = HIGH_RES * HIGH_RES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// feature, face geometry, face attributes, edge geometry, edge attributes
    pub lambda: [f64; 5],
    /// coordinates, normals, trimming mask
    pub alpha: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0, 1.0, 0.3, 0.5, 0.3], alpha: [1.0, 0.5, 0.3] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain(&self.alpha).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub feat: f64,
    pub face_geom: f64,
    pub coord: f64,
    pub norm: f64,
    pub trim: f64,
    pub face_attr: f64,
    pub edge_geom: f64,
    pub edge_attr: f64,
    pub total: f64,
}

impl LossReport {
    pub const TERMS: [&'static str; 5] = ["feat", "face_geom", "face_attr", "edge_geom", "edge_attr"];

    pub fn terms(&self) -> [f64; 5] {
        [self.feat, self.face_geom, self.face_attr, self.edge_geom, self.edge_attr]
    }

    fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.feat += r.feat / n;
            m.face_geom += r.face_geom / n;
            m.coord += r.coord / n;
            m.norm += r.norm / n;
            m.trim += r.trim / n;
            m.face_attr += r.face_attr / n;
            m.edge_geom += r.edge_geom / n;
            m.edge_attr += r.edge_attr / n;
            m.total += r.total / n;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub mask_ratio: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            lr: 1e-4,
            batch_size: 8,
            epochs: 20,
            max_steps: None,
            mask_ratio: 0.7,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Ground truth for every loss term of a batch. Feature targets come from the
/// encoder on unmasked inputs and carry no gradient.
#[derive(Clone, Debug)]
pub struct Targets<S: Real> {
    pub f_high: Rc<Mat<S>>,
    pub e: Rc<Mat<S>>,
    pub coords: Rc<Mat<S>>,
    pub normals: Rc<Mat<S>>,
    pub trim: Rc<Mat<S>>,
    pub face_attr: Rc<Mat<S>>,
    pub edge_geom: Rc<Mat<S>>,
    pub edge_attr: Rc<Mat<S>>,
}

impl<S: Real> Targets<S> {
    fn geometry(batch: &Batch<S>, f_high: Mat<S>, e: Mat<S>) -> Self {
        let cols = |m: &Mat<S>, a: usize, b: usize| {
            let mut out = Mat::zeros(m.rows(), b - a);
            for r in 0..m.rows() {
                out.row_mut(r).copy_from_slice(&m.row(r)[a..b]);
            }
            Rc::new(out)
        };
        Self {
            f_high: Rc::new(f_high),
            e: Rc::new(e),
            coords: cols(&batch.grid_high, 0, 3),
            normals: cols(&batch.grid_high, 3, 6),
            trim: cols(&batch.grid_high, 6, 7),
            face_attr: Rc::new(batch.face_attr.clone()),
            edge_geom: Rc::new(batch.edge_geom.clone()),
            edge_attr: Rc::new(batch.edge_attr.clone()),
        }
    }
}

/// Loss terms of one forward pass, still attached to the tape.
#[derive(Clone, Copy)]
pub struct LossTerms<'t, S: Real> {
    pub feat: Var<'t, S>,
    pub coord: Var<'t, S>,
    pub norm: Var<'t, S>,
    pub trim: Var<'t, S>,
    pub face_attr: Var<'t, S>,
    pub edge_geom: Var<'t, S>,
    pub edge_attr: Var<'t, S>,
}

impl<'t, S: Real> LossTerms<'t, S> {
    pub fn face_geom(&self, w: &LossWeights) -> Var<'t, S> {
        self.coord.scale(w.alpha[0]).add(self.norm.scale(w.alpha[1])).add(self.trim.scale(w.alpha[2]))
    }

    /// The five weighted terms in report order.
    pub fn terms(&self, w: &LossWeights) -> [Var<'t, S>; 5] {
        [self.feat, self.face_geom(w), self.face_attr, self.edge_geom, self.edge_attr]
    }

    pub fn total(&self, w: &LossWeights) -> Var<'t, S> {
        let t = self.terms(w);
        (1..5).fold(t[0].scale(w.lambda[0]), |acc, k| acc.add(t[k].scale(w.lambda[k])))
    }

    pub fn report(&self, w: &LossWeights) -> LossReport {
        let v = |x: Var<'t, S>| x.item().as_f64();
        let (coord, norm, trim) = (v(self.coord), v(self.norm), v(self.trim));
        let face_geom = w.alpha[0] * coord + w.alpha[1] * norm + w.alpha[2] * trim;
        let mut r = LossReport {
            feat: v(self.feat),
            face_geom,
            coord,
            norm,
            trim,
            face_attr: v(self.face_attr),
            edge_geom: v(self.edge_geom),
            edge_attr: v(self.edge_attr),
            total: 0.0,
        };
        r.total = r.terms().iter().zip(w.lambda).map(|(t, l)| l * t).sum();
        r
    }
}

/// Row weights averaging within each model (over `count` entities of `per`
/// rows each) and uniformly across the `B` models of the batch. Entities whose
/// flag is false get weight 0.
fn row_weights<S: Real>(off: &[usize], flags: Option<&[bool]>, per: usize) -> Rc<Vec<S>> {
    let b = (off.len() - 1) as f64;
    let mut w = vec![S::zero(); off.last().unwrap() * per];
    for m in 0..off.len() - 1 {
        let range = off[m]..off[m + 1];
        let count = range.clone().filter(|&i| flags.is_none_or(|f| f[i])).count();
        if count == 0 {
            continue;
        }
        let wt = S::of(1.0 / (b * count as f64 * per as f64));
        for i in range.filter(|&i| flags.is_none_or(|f| f[i])) {
            w[i * per..(i + 1) * per].iter_mut().for_each(|x| *x = wt);
        }
    }
    Rc::new(w)
}

fn sq_err<'t, S: Real>(pred: Var<'t, S>, target: &Rc<Mat<S>>, w: Rc<Vec<S>>) -> Var<'t, S> {
    if pred.rows() == 0 {
        return pred.tape().scalar(0.0);
    }
    pred.weighted_sq_err(target.clone(), w)
}

/// Feature term over masked rows only: squared error averaged over the
/// masked faces and the feature channels, plus the same over masked edges.
pub fn loss_feat<'t, S: Real>(
    recon_f: Var<'t, S>,
    recon_e: Var<'t, S>,
    targets: &Targets<S>,
    mask: &BatchMask,
    face_off: &[usize],
    edge_off: &[usize],
) -> Var<'t, S> {
    let per_channel = |w: Rc<Vec<S>>, cols: usize| Rc::new(w.iter().map(|&x| x * S::of(1.0 / cols.max(1) as f64)).collect::<Vec<S>>());
    let f = sq_err(recon_f, &targets.f_high, per_channel(row_weights(face_off, Some(&mask.faces), 1), recon_f.cols()));
    let e = sq_err(recon_e, &targets.e, per_channel(row_weights(edge_off, Some(&mask.edges), 1), recon_e.cols()));
    f.add(e)
}

/// All reconstruction terms of a decoded batch. Geometry and attribute terms
/// cover every entity; the feature term covers masked entities only.
pub fn compute_losses<'t, S: Real>(rec: &Reconstruction<'t, S>, targets: &Targets<S>, mask: &BatchMask, batch: &Batch<S>) -> LossTerms<'t, S> {
    let (fo, eo) = (&batch.face_off, &batch.edge_off);
    let pts = row_weights::<S>(fo, None, FACE_POINTS);
    let trim = if rec.face_geom.rows() == 0 {
        rec.face_geom.tape().scalar(0.0)
    } else {
        rec.face_geom.slice_cols(6, 7).weighted_bce_logits(targets.trim.clone(), pts.clone(), BCE_EPS)
    };
    LossTerms {
        feat: loss_feat(rec.face_feat, rec.edge_feat, targets, mask, fo, eo),
        coord: sq_err(rec.face_geom.slice_cols(0, 3), &targets.coords, pts.clone()),
        norm: sq_err(rec.face_geom.slice_cols(3, 6), &targets.normals, pts),
        trim,
        face_attr: sq_err(rec.face_attr, &targets.face_attr, row_weights(fo, None, 1)),
        edge_geom: sq_err(rec.edge_geom, &targets.edge_geom, row_weights(eo, None, EDGE_SAMPLES)),
        edge_attr: sq_err(rec.edge_attr, &targets.edge_attr, row_weights(eo, None, 1)),
    }
}

/// Encoder, mask tokens, graph encoder and reconstruction decoder.
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    pub config: ModelConfig,
    pub encoder: BrepEncoder,
    pub tokens: MaskTokens,
    pub graph: GraphEncoder,
    pub decoder: BrepDecoder,
}

pub const ENCODER_PREFIXES: [&str; 2] = ["embed.", "hgt."];

impl MaskedAutoencoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            config: config.clone(),
            encoder: BrepEncoder::new(store, "embed", config, &mut rng),
            tokens: MaskTokens::new(store, "mask_token", config.dim, &mut rng),
            graph: GraphEncoder::new(store, "hgt", config, &mut rng),
            decoder: BrepDecoder::new(store, "decoder", config, &mut rng),
        }
    }

    /// Runs the encoder on the original inputs with parameters held constant.
    pub fn build_targets<S: Real>(&self, store: &ParamStore<S>, batch: &Batch<S>) -> Targets<S> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false, Trainable::None, 0);
        let b = self.encoder.forward(&ctx, batch);
        let (f, e) = ((*b.f_high.detach().value()).clone(), (*b.e.detach().value()).clone());
        Targets::geometry(batch, f, e)
    }

    /// Masked encode, graph encode and decode.
    pub fn reconstruct<'t, S: Real>(&self, ctx: &Ctx<'t, '_, S>, batch: &Batch<S>, mask: &BatchMask) -> Result<Reconstruction<'t, S>> {
        let topo = Topology::of(batch);
        let bundle = self.encoder.forward(ctx, &batch.masked(mask));
        let bundle = apply_mask(ctx, bundle, mask, &self.tokens)?;
        let latent = self.graph.forward(ctx, bundle, &topo);
        Ok(self.decoder.forward(ctx, latent, &topo))
    }

    /// Same result as [`Self::build_targets`] followed by [`Self::reconstruct`],
    /// exploiting that the encoder is per-entity: visible entities are encoded
    /// once (their detached output doubles as the target) and masked entities
    /// only without gradient, since the mask tokens replace them.
    pub fn reconstruct_for_training<'t, S: Real>(
        &self,
        ctx: &Ctx<'t, '_, S>,
        batch: &Batch<S>,
        mask: &BatchMask,
    ) -> Result<(Reconstruction<'t, S>, Targets<S>)> {
        if mask.faces.len() != batch.n_faces() || mask.edges.len() != batch.n_edges() {
            return Err(Error::Contract("mask does not match batch".into()));
        }
        let split = |flags: &[bool]| -> (Vec<usize>, Vec<usize>) { (0..flags.len()).partition(|&i| !flags[i]) };
        let (vis_f, hid_f) = split(&mask.faces);
        let (vis_e, hid_e) = split(&mask.edges);
        let (nf, ne, d) = (batch.n_faces(), batch.n_edges(), self.config.dim);

        let visible = self.encoder.forward(ctx, &batch.select(&vis_f, &vis_e));
        let tape = Tape::new();
        let frozen = Ctx::new(&tape, ctx.store(), false, Trainable::None, 0);
        let hidden = (!hid_f.is_empty() || !hid_e.is_empty()).then(|| self.encoder.forward(&frozen, &batch.select(&hid_f, &hid_e)));

        let assemble = |vis: &Mat<S>, hid: Option<&Mat<S>>, vi: &[usize], hi: &[usize], n: usize| {
            let mut out = Mat::zeros(n, d);
            for (k, &r) in vi.iter().enumerate() {
                out.row_mut(r).copy_from_slice(vis.row(k));
            }
            if let Some(h) = hid {
                for (k, &r) in hi.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(h.row(k));
                }
            }
            out
        };
        let f_t = assemble(&visible.f_high.value(), hidden.as_ref().map(|h| h.f_high.value()).as_deref(), &vis_f, &hid_f, nf);
        let e_t = assemble(&visible.e.value(), hidden.as_ref().map(|h| h.e.value()).as_deref(), &vis_e, &hid_e, ne);
        let targets = Targets::geometry(batch, f_t, e_t);

        let place = |x: Var<'t, S>, idx: Vec<usize>, n: usize| if idx.len() == n { x } else { x.scatter_add_rows(Rc::new(idx), n) };
        let bundle = FeatureBundle {
            f_low: place(visible.f_low, vis_f.clone(), nf),
            f_high: place(visible.f_high, vis_f, nf),
            e: place(visible.e, vis_e, ne),
        };
        let bundle = apply_mask(ctx, bundle, mask, &self.tokens)?;
        let topo = Topology::of(batch);
        let latent = self.graph.forward(ctx, bundle, &topo);
        Ok((self.decoder.forward(ctx, latent, &topo), targets))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossReport,
}

pub const LOSS_CSV_HEADER: &str = "epoch,total,feat,face_geom,face_attr,edge_geom,edge_attr";

/// Loss history as CSV, preceded by a `# config=` provenance line.
pub fn loss_csv(history: &[EpochLoss], config_json: &str) -> String {
    let mut s = format!("# config={config_json}\n{LOSS_CSV_HEADER}\n");
    for h in history {
        let l = &h.loss;
        s += &format!("{},{},{},{},{},{},{}\n", h.epoch, l.total, l.feat, l.face_geom, l.face_attr, l.edge_geom, l.edge_attr);
    }
    s
}

/// Optimizer state and model for a pre-training run.
pub struct Pretrainer<S: Real> {
    pub config: TrainConfig,
    pub model: MaskedAutoencoder,
    pub store: ParamStore<S>,
    opt: AdamW<S>,
    step: usize,
    total_steps: usize,
}

impl<S: Real> Pretrainer<S> {
    pub fn new(config: TrainConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        if n_train == 0 {
            return Err(Error::Contract("pre-training needs a nonempty training split".into()));
        }
        let mut store = ParamStore::new();
        let model = MaskedAutoencoder::new(&mut store, &config.model, derive_seed(config.seed, 0));
        let opt = AdamW::new(config.optimizer.clone(), store.len());
        let per_epoch = n_train.div_ceil(config.batch_size);
        let total_steps = config.max_steps.map_or(per_epoch * config.epochs, |m| m.min(per_epoch * config.epochs));
        Ok(Self { config, model, store, opt, step: 0, total_steps })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Masks for the models of the current step, reproducible from the seed.
    pub fn step_masks(&self, graphs: &[&Gaag]) -> Result<Vec<MaskSpec>> {
        let base = derive_seed(self.config.seed ^ 0x6d61_736b, self.step as u64);
        graphs.iter().enumerate().map(|(i, g)| make_mask(g.n_faces, g.n_edges, self.config.mask_ratio, derive_seed(base, i as u64))).collect()
    }

    /// One optimizer update on `graphs`.
    pub fn train_step(&mut self, graphs: &[&Gaag]) -> Result<LossReport> {
        let batch = Batch::<S>::new(graphs);
        let specs = self.step_masks(graphs)?;
        let mask = BatchMask::from_specs(&batch, &specs)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, true, Trainable::All, derive_seed(self.config.seed ^ 0x64726f70, self.step as u64));
        let (rec, targets) = self.model.reconstruct_for_training(&ctx, &batch, &mask)?;
        let terms = compute_losses(&rec, &targets, &mask, &batch);
        let w = &self.config.weights;
        let report = terms.report(w);
        for (name, v) in LossReport::TERMS.iter().zip(report.terms()) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite {name} loss ({v}) at step {}", self.step)));
            }
        }
        let total = terms.total(w);
        let mut grads = tape.backward(total);
        let grads = ctx.param_grads(&mut grads);
        drop(ctx);
        let lr = cosine_lr(self.config.lr, self.step, self.total_steps);
        self.opt.step(&mut self.store, &grads, |_| lr);
        self.step += 1;
        Ok(report)
    }

    /// One pass over `train` in a seed-determined order; returns the mean step loss.
    pub fn run_epoch(&mut self, train: &[Sample], epoch: usize, mut on_step: impl FnMut(usize, &LossReport)) -> Result<LossReport> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed ^ 0x6f72_6472, epoch as u64)));
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if self.finished() {
                break;
            }
            let graphs: Vec<&Gaag> = chunk.iter().map(|&i| &train[i].graph).collect();
            let r = self.train_step(&graphs)?;
            on_step(self.step - 1, &r);
            reports.push(r);
        }
        Ok(LossReport::mean(&reports))
    }
}

/// Eval-mode loss of `model` on `graphs` under fixed per-model masks.
pub fn evaluate_loss<S: Real>(
    model: &MaskedAutoencoder,
    store: &ParamStore<S>,
    graphs: &[&Gaag],
    masks: &[MaskSpec],
    weights: &LossWeights,
) -> Result<LossReport> {
    let batch = Batch::<S>::new(graphs);
    let mask = BatchMask::from_specs(&batch, masks)?;
    let targets = model.build_targets(store, &batch);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, store);
    let rec = model.reconstruct(&ctx, &batch, &mask)?;
    Ok(compute_losses(&rec, &targets, &mask, &batch).report(weights))
}

/// Full pre-training run. Returns the trained state and the per-epoch losses.
pub fn pretrain<S: Real>(train: &[Sample], config: &TrainConfig, mut on_step: impl FnMut(usize, &LossReport)) -> Result<(Pretrainer<S>, Vec<EpochLoss>)> {
    let mut t = Pretrainer::new(config.clone(), train.len())?;
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        if t.finished() {
            break;
        }
        let loss = t.run_epoch(train, epoch, &mut on_step)?;
        history.push(EpochLoss { epoch, loss });
    }
    Ok((t, history))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::gaag::build_gaag;
    use crate::synth::{generate_model, Template};

    fn small() -> ModelConfig {
        ModelConfig { dim: 32, heads: 4, ffn_hidden: 64, mpnn_hidden: 48, fold_hidden: 32, fold_code: 8, ..Default::default() }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn feat_loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rf, re, tf, te) = (random(7, 5, &mut rng), random(4, 5, &mut rng), random(7, 5, &mut rng), random(4, 5, &mut rng));
        let mask = BatchMask { faces: vec![true, false, true, false, true, true, false], edges: vec![false, true, true, false] };
        let face_off = [0, 3, 7];
        let edge_off = [0, 1, 4];
        let mut targets = Targets::geometry(&Batch::<f64>::new(&[]), Mat::zeros(0, 5), Mat::zeros(0, 5));
        targets.f_high = Rc::new(tf.clone());
        targets.e = Rc::new(te.clone());
        let tape = Tape::new();
        let got = loss_feat(tape.constant(rf.clone()), tape.constant(re.clone()), &targets, &mask, &face_off, &edge_off).item();

        let mut expect = 0.0;
        for (off, flags, p, t) in [(&face_off[..], &mask.faces, &rf, &tf), (&edge_off[..], &mask.edges, &re, &te)] {
            for m in 0..2 {
                let rows: Vec<usize> = (off[m]..off[m + 1]).filter(|&r| flags[r]).collect();
                let mut s = 0.0;
                for &r in &rows {
                    for c in 0..5 {
                        s += (p.get(r, c) - t.get(r, c)).powi(2);
                    }
                }
                if !rows.is_empty() {
                    expect += s / rows.len() as f64 / 5.0 / 2.0;
                }
            }
        }
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");

        let none = BatchMask { faces: vec![false; 7], edges: vec![false; 4] };
        assert_eq!(loss_feat(tape.constant(rf), tape.constant(re), &targets, &none, &face_off, &edge_off).item(), 0.0);
    }

    #[test]
    fn face_geometry_terms_match_point_loop() {
        let g = build_gaag(&generate_model(Template::Box, 0).unwrap()).unwrap();
        let batch = Batch::<f64>::new(&[&g]);
        let targets = Targets::geometry(&batch, Mat::zeros(6, 4), Mat::zeros(12, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random(6 * 169, 7, &mut rng);
        let tape = Tape::new();
        let p = tape.constant(pred.clone());
        let w = row_weights::<f64>(&batch.face_off, None, FACE_POINTS);
        let coord = sq_err(p.slice_cols(0, 3), &targets.coords, w.clone()).item();
        let trim = p.slice_cols(6, 7).weighted_bce_logits(targets.trim.clone(), w, BCE_EPS).item();
        let (mut c, mut t) = (0.0, 0.0);
        for r in 0..pred.rows() {
            for k in 0..3 {
                c += (pred.get(r, k) - batch.grid_high.get(r, k)).powi(2);
            }
            let prob = (1.0 / (1.0 + (-pred.get(r, 6)).exp())).clamp(BCE_EPS, 1.0 - BCE_EPS);
            let tau = batch.grid_high.get(r, 6);
            t -= tau * prob.ln() + (1.0 - tau) * (1.0 - prob).ln();
        }
        let n = pred.rows() as f64;
        assert!((coord - c / n).abs() < 1e-9);
        assert!((trim - t / n).abs() < 1e-9);
    }

    #[test]
    fn bce_closed_forms() {
        let tape = Tape::<f64>::new();
        let target = Rc::new(Mat::from_vec(2, 1, vec![1.0, 1.0]));
        let w = Rc::new(vec![0.5, 0.5]);
        let half = tape.constant(Mat::zeros(2, 1)).weighted_bce_logits(target.clone(), w.clone(), BCE_EPS).item();
        assert!((half - 2f64.ln()).abs() < 1e-12);
        let sure = tape.constant(Mat::filled(2, 1, 40.0)).weighted_bce_logits(target, w, BCE_EPS).item();
        assert!(sure <= 2e-7);
    }

    #[test]
    fn unit_attribute_error_gives_unit_loss() {
        let tape = Tape::<f64>::new();
        let mut pred = Mat::zeros(1, 16);
        pred.set(0, 5, 1.0);
        let l = sq_err(tape.constant(pred), &Rc::new(Mat::zeros(1, 16)), row_weights(&[0, 1], None, 1)).item();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn report_total_is_weighted_sum_and_empty_mask_zeroes_feat() {
        let cfg = TrainConfig { model: small(), ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let model = MaskedAutoencoder::new(&mut store, &cfg.model, 3);
        let g = build_gaag(&generate_model(Template::BoxStep, 1).unwrap()).unwrap();
        let batch = Batch::<f64>::new(&[&g]);
        let spec = make_mask(g.n_faces, g.n_edges, 0.5, 1).unwrap();
        let mask = BatchMask::from_specs(&batch, &[spec]).unwrap();
        let targets = model.build_targets(&store, &batch);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, Trainable::All, 0);
        let rec = model.reconstruct(&ctx, &batch, &mask).unwrap();
        let terms = compute_losses(&rec, &targets, &mask, &batch);
        let r = terms.report(&cfg.weights);
        let expect: f64 = r.terms().iter().zip(cfg.weights.lambda).map(|(t, l)| t * l).sum();
        assert_eq!(r.total, expect);
        assert!(r.terms().iter().all(|t| *t >= 0.0));
        assert!((terms.total(&cfg.weights).item() - r.total).abs() < 1e-9 * r.total);

        let zero = BatchMask::none(&batch);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, Trainable::All, 0);
        let rec = model.reconstruct(&ctx, &batch, &zero).unwrap();
        assert_eq!(compute_losses(&rec, &targets, &zero, &batch).feat.item(), 0.0);
    }

    #[test]
    fn training_path_equals_zero_and_replace_path() {
        let cfg = small();
        let mut store = ParamStore::<f64>::new();
        let model = MaskedAutoencoder::new(&mut store, &cfg, 5);
        let gs: Vec<Gaag> = [Template::BoxSlot, Template::Box].iter().map(|&t| build_gaag(&generate_model(t, 2).unwrap()).unwrap()).collect();
        let batch = Batch::<f64>::new(&[&gs[0], &gs[1]]);
        let specs = vec![make_mask(gs[0].n_faces, gs[0].n_edges, 0.7, 1).unwrap(), MaskSpec { masked_faces: vec![], masked_edges: vec![], ratio: 0.0, seed: 0 }];
        let mask = BatchMask::from_specs(&batch, &specs).unwrap();
        let w = LossWeights::default();

        let targets = model.build_targets(&store, &batch);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let slow = compute_losses(&model.reconstruct(&ctx, &batch, &mask).unwrap(), &targets, &mask, &batch);
        let mut g_slow = tape.backward(slow.total(&w));
        let g_slow = ctx.param_grads(&mut g_slow);

        let tape2 = Tape::new();
        let ctx2 = Ctx::eval(&tape2, &store);
        let (rec, t2) = model.reconstruct_for_training(&ctx2, &batch, &mask).unwrap();
        assert!(t2.f_high.max_abs_diff(&targets.f_high) < 1e-12);
        assert!(t2.e.max_abs_diff(&targets.e) < 1e-12);
        let fast = compute_losses(&rec, &t2, &mask, &batch);
        assert!((fast.report(&w).total - slow.report(&w).total).abs() < 1e-10);
        let mut g_fast = tape2.backward(fast.total(&w));
        let g_fast = ctx2.param_grads(&mut g_fast);
        for (a, b) in g_slow.iter().zip(&g_fast) {
            match (a, b) {
                (Some(a), Some(b)) => assert!(a.max_abs_diff(b) < 1e-9),
                (a, b) => assert!(a.as_ref().is_none_or(|m| m.data().iter().all(|x| *x == 0.0)) && b.as_ref().is_none_or(|m| m.data().iter().all(|x| *x == 0.0))),
            }
        }
    }

    #[test]
    fn non_finite_input_aborts_with_term_name() {
        let cfg = TrainConfig { model: small(), batch_size: 1, epochs: 1, ..Default::default() };
        let mut g = build_gaag(&generate_model(Template::Box, 1).unwrap()).unwrap();
        g.edge_attrs[0].length = f64::NAN;
        let mut t = Pretrainer::<f64>::new(cfg, 1).unwrap();
        let err = t.train_step(&[&g]).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("loss")), "{err}");
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let cfg = TrainConfig { model: small(), batch_size: 2, epochs: 2, ..Default::default() };
        let samples: Vec<Sample> = [Template::Box, Template::BoxHole, Template::CylBoss]
            .iter()
            .map(|&t| Sample { id: t.to_string(), graph: build_gaag(&generate_model(t, 0).unwrap()).unwrap() })
            .collect();
        let (_, a) = pretrain::<f32>(&samples, &cfg, |_, _| {}).unwrap();
        let (_, b) = pretrain::<f32>(&samples, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(loss_csv(&a, "{}"), loss_csv(&b, "{}"));
    }
}
