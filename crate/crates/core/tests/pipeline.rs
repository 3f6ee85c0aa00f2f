mod common;

use std::path::Path;

use brepmae::checkpoint::{Checkpoint, CheckpointKind, RngState};
use brepmae::corpus::Sample;
use brepmae::embed::{make_mask, Batch, BatchMask, ModelConfig};
use brepmae::export::{coordinate_errors, mean_point, reconstruct_points};
use brepmae::finetune::{Task, TaskModel};
use brepmae::gaag::read_gaag;
use brepmae::harness::{load_task_model, RunConfig};
use brepmae::hgt::Topology;
use brepmae::nn::{Ctx, ParamStore};
use brepmae::pretrain::{compute_losses, MaskedAutoencoder, Pretrainer, TrainConfig};
use brepmae::synth::Template;
use brepmae::tape::Tape;
use common::{graph, tiny_config};

fn golden() -> brepmae::gaag::Gaag {
    read_gaag(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/min_one_face.json")).unwrap()
}

#[test]
fn hand_written_single_face_file_parses() {
    let g = golden();
    assert_eq!((g.n_faces, g.n_edges), (1, 0));
    assert!(g.adjacency.is_empty());
    assert_eq!(g.face_grids_high[0].points.len(), 169);
    assert_eq!(g.face_attrs[0].area, 4.0);
}

#[test]
fn single_face_model_runs_end_to_end() {
    let g = golden();
    let mut store = ParamStore::<f64>::new();
    let model = MaskedAutoencoder::new(&mut store, &tiny_config(), 0);
    let batch = Batch::<f64>::new(&[&g]);
    assert_eq!(Topology::of(&batch).n_edges(), 0);
    let mask = BatchMask::from_specs(&batch, &[make_mask(1, 0, 0.7, 0).unwrap()]).unwrap();
    assert!(!mask.faces[0]);
    let targets = model.build_targets(&store, &batch);
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let rec = model.reconstruct(&ctx, &batch, &mask).unwrap();
    assert_eq!(rec.face_geom.rows(), 169);
    assert_eq!(rec.edge_geom.rows(), 0);
    let terms = compute_losses(&rec, &targets, &mask, &batch).report(&Default::default());
    assert_eq!(terms.feat, 0.0);
    assert_eq!(terms.edge_geom, 0.0);
    assert!(terms.total.is_finite() && terms.face_geom > 0.0);

    let mut s = ParamStore::<f64>::new();
    let cls = TaskModel::new(&mut s, &tiny_config(), Task::Classification, 4, 0).unwrap();
    let pred = cls.predict(&s, &[&g]).unwrap();
    assert_eq!(pred[0].len(), 1);
}

#[test]
fn overfit_single_model_beats_mean_predictor() {
    let g = graph(Template::BoxStep, 1);
    let config = TrainConfig {
        model: ModelConfig { dropout: 0.0, ..tiny_config() },
        lr: 1e-3,
        batch_size: 1,
        epochs: 150,
        seed: 2,
        ..Default::default()
    };
    let train = [Sample { id: "m".into(), graph: g.clone() }];
    let mut t = Pretrainer::<f32>::new(config, 1).unwrap();
    for epoch in 0..150 {
        t.run_epoch(&train, epoch, |_, _| {}).unwrap();
    }
    let none = make_mask(g.n_faces, g.n_edges, 0.0, 0).unwrap();
    let points = reconstruct_points(&t.model, &t.store, &g, &none).unwrap();
    let faces: Vec<usize> = (0..g.n_faces).collect();
    let (model_err, baseline_err) = coordinate_errors(&g, &points, &faces, mean_point(&[&g]));
    assert!(model_err < baseline_err, "model {model_err} baseline {baseline_err}");
}

#[test]
fn task_checkpoint_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::<f32>::new();
    let cfg = tiny_config();
    let model = TaskModel::new(&mut store, &cfg, Task::Segmentation, 5, 7).unwrap();
    let config = brepmae::finetune::FinetuneConfig { task: Task::Segmentation, model: cfg, ..Default::default() };
    let path = dir.path().join("t.ckpt");
    Checkpoint::from_store(CheckpointKind::Finetune, serde_json::to_value(&config).unwrap(), None, RngState { seed: 7, step: 0 }, &store).save(&path).unwrap();
    let (back, back_store) = load_task_model(&Checkpoint::load(&path).unwrap()).unwrap();
    let gs = [graph(Template::CylBoss, 0), graph(Template::BoxHole, 1)];
    let refs: Vec<_> = gs.iter().collect();
    let logits = |m: &TaskModel, s: &ParamStore<f32>| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, s);
        m.forward(&ctx, &Batch::new(&refs)).unwrap().value().data().to_vec()
    };
    assert_eq!(logits(&model, &store), logits(&back, &back_store));
}

#[test]
fn run_config_defaults_and_overrides() {
    let c = RunConfig::from_json(r#"{"pretrain": {"mask_ratio": 0.5, "model": {"dim": 64}}}"#).unwrap();
    assert_eq!(c.pretrain.mask_ratio, 0.5);
    assert_eq!(c.pretrain.model.dim, 64);
    assert_eq!(c.pretrain.model.heads, 8);
    assert_eq!(c.finetune, Default::default());
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
}
