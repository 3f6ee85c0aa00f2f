use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use brepmae::corpus::{Manifest, Split};
use brepmae::evalkit::EvalReport;
use brepmae::gaag::read_gaag;

const TINY: &str = r#"{
  "pretrain": {
    "batch_size": 2,
    "lr": 0.0003,
    "model": {"dim": 32, "heads": 4, "ffn_hidden": 48, "mpnn_hidden": 40, "fold_hidden": 24, "fold_code": 8, "head_hidden": [48, 32]}
  },
  "finetune": {
    "batch_size": 4,
    "epochs": 2,
    "lr_head": 0.001,
    "model": {"dim": 32, "heads": 4, "ffn_hidden": 48, "mpnn_hidden": 40, "fold_hidden": 24, "fold_code": 8, "head_hidden": [48, 32]}
  }
}"#;

fn brepmae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brepmae")).current_dir(dir).env_remove("BREPMAE_OUT").args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brepmae(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn with_config(dir: &Path) -> &'static str {
    fs::write(dir.join("run.json"), TINY).unwrap();
    "run.json"
}

#[test]
fn generate_follows_split_fractions() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--out", "c", "--templates", "box:10", "--split", "70,15,15", "--seed", "3"]);
    let m = Manifest::load(&dir.path().join("c/manifest.json")).unwrap();
    let n = 10.0_f64;
    let train = (0.7 * n).round() as usize;
    let val = (0.15 * n).round() as usize;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).count());
    assert_eq!(counts, [train, val, 10 - train - val]);
    for e in &m.entries {
        let g = read_gaag(&dir.path().join("c").join(&e.gaag_path)).unwrap();
        assert_eq!((g.n_faces, g.n_edges), (6, 12));
    }
}

#[test]
fn extract_writes_a_readable_gaag() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"template": "box_hole", "seed": 5}"#).unwrap();
    ok(dir.path(), &["extract", "--in", "spec.json", "--out", "g/box_hole.json"]);
    let g = read_gaag(&dir.path().join("g/box_hole.json")).unwrap();
    assert!(g.n_faces > 6);
    let bad = brepmae(dir.path(), &["extract", "--in", "missing.json", "--out", "x.json"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = brepmae(dir.path(), &["pretrain", "--corpus", "c", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(brepmae(dir.path(), &["frobnicate"]).status.code(), Some(2));

    ok(dir.path(), &["generate", "--out", "c", "--templates", "box:2", "--split", "1,0,0"]);
    fs::write(dir.path().join("bad.json"), r#"{"pretrain": {"learning_rate": 0.1}}"#).unwrap();
    let out = brepmae(dir.path(), &["pretrain", "--corpus", "c", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = brepmae(dir.path(), &["pretrain", "--corpus", "c", "--mask-ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = brepmae(dir.path(), &["pretrain", "--corpus", "nowhere"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pretrain_is_deterministic_and_records_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path());
    ok(dir.path(), &["generate", "--out", "c", "--templates", "box:2,l_bracket:2", "--split", "1,0,0"]);
    for out in ["a", "b"] {
        ok(dir.path(), &["pretrain", "--corpus", "c", "--config", cfg, "--epochs", "2", "--mask-ratio", "0.7", "--seed", "1", "--out", out]);
    }
    let a = fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b/loss.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert!(lines[0].starts_with("# config="));
    let embedded: serde_json::Value = serde_json::from_str(&lines[0]["# config=".len()..]).unwrap();
    assert_eq!(embedded["epochs"], 2);
    assert_eq!(embedded["model"]["dim"], 32);
    assert_eq!(lines[1], "epoch,total,feat,face_geom,face_attr,edge_geom,edge_attr");
    assert_eq!(lines.len(), 4);
    assert_eq!(fs::read(dir.path().join("a/model.ckpt")).unwrap(), fs::read(dir.path().join("b/model.ckpt")).unwrap());
}

#[test]
fn untrained_head_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path());
    ok(dir.path(), &["generate", "--out", "c", "--templates", "box:5,l_bracket:5,box_hole:10,box_slot:5,box_step:5,cyl_boss:10", "--split", "0,0,1"]);
    let train = ["generate", "--out", "u", "--templates", "box:1,cyl_boss:1", "--split", "1,0,0"];
    ok(dir.path(), &train);
    ok(dir.path(), &["pretrain", "--corpus", "u", "--config", cfg, "--epochs", "1", "--out", "p"]);
    let mut accs = Vec::new();
    for seed in ["0", "1", "2"] {
        ok(dir.path(), &["eval", "--corpus", "c", "--checkpoint", "p/model.ckpt", "--fresh-head", "classification", "--seed", seed, "--out", "e.json"]);
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
        assert_eq!(r.n_items, 40);
        accs.push(r.accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sd = (0.25 * 0.75 / 40.0_f64).sqrt();
    assert!((mean - 0.25).abs() <= 3.0 * sd, "mean accuracy {mean} from {accs:?}");
}

#[test]
fn finetune_eval_and_reconstruct_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path());
    ok(dir.path(), &["generate", "--out", "c", "--templates", "box:2,box_hole:2,box_slot:2,cyl_boss:2", "--split", "50,25,25", "--seed", "1"]);
    ok(dir.path(), &["pretrain", "--corpus", "c", "--config", cfg, "--epochs", "1", "--out", "p"]);
    ok(dir.path(), &["finetune", "--corpus", "c", "--checkpoint", "p/model.ckpt", "--config", cfg, "--task", "segmentation", "--ratio", "1", "--freeze-encoder", "--out", "f"]);
    let metrics = fs::read_to_string(dir.path().join("f/metrics.csv")).unwrap();
    assert!(metrics.lines().next().unwrap().contains("\"freeze_encoder\":true"));
    assert_eq!(metrics.lines().nth(1), Some("epoch,train_loss,val_acc,val_miou"));
    assert_eq!(metrics.lines().count(), 4);

    let table = ok(dir.path(), &["eval", "--corpus", "c", "--checkpoint", "f/task.ckpt", "--split", "test", "--out", "r/eval.json"]);
    assert!(table.contains("accuracy"));
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("r/eval.json")).unwrap()).unwrap();
    assert_eq!(r.per_class_iou.len(), 5);

    let m = Manifest::load(&dir.path().join("c/manifest.json")).unwrap();
    let gaag = format!("c/{}", m.entries[0].gaag_path);
    ok(dir.path(), &["reconstruct", "--checkpoint", "p/model.ckpt", "--gaag", &gaag, "--out", "x"]);
    let n_faces = read_gaag(&dir.path().join(&gaag)).unwrap().n_faces;
    let stem = Path::new(&gaag).file_stem().unwrap().to_str().unwrap().to_string();
    for suffix in ["original.xyz", "masked.xyz", "recon.xyz", "error.txt"] {
        let text = fs::read_to_string(dir.path().join(format!("x/{stem}_{suffix}"))).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 169 * n_faces, "{suffix}");
        assert!(text.starts_with("# config="));
    }
    let wrong = brepmae(dir.path(), &["reconstruct", "--checkpoint", "f/task.ckpt", "--gaag", &gaag]);
    assert_eq!(wrong.status.code(), Some(3));
}

#[test]
fn relative_outputs_land_under_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_brepmae"))
        .current_dir(dir.path())
        .env("BREPMAE_OUT", &root)
        .args(["generate", "--out", "c", "--templates", "box:1", "--split", "1,0,0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("c/manifest.json").exists());
    assert!(!dir.path().join("c").exists());
}
