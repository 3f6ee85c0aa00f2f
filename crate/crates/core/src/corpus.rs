//! Corpus manifests, split assignment and on-disk layout (`manifest.json` plus `gaag/<id>.json`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaag::{build_gaag, read_gaag, write_gaag, Gaag};
use crate::synth::{generate_model, Template};

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A model reference used by `extract`: `{"template": "box_hole", "seed": 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub template: Template,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateCount {
    pub template: Template,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub counts: Vec<TemplateCount>,
    /// Train/val/test weights; normalized by their sum.
    pub split: [f64; 3],
    pub master_seed: u64,
}

impl CorpusConfig {
    pub fn uniform(per_template: usize, split: [f64; 3], master_seed: u64) -> Self {
        Self {
            counts: Template::ALL.iter().map(|&template| TemplateCount { template, count: per_template }).collect(),
            split,
            master_seed,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.count).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub template: Template,
    pub seed: u64,
    pub shape_label: usize,
    pub split: Split,
    pub gaag_path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub master_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// SplitMix64 step, used to derive per-model seeds from the master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Split sizes by rounding each of the first two fractions; the test split takes the rest.
pub fn split_sizes(n: usize, split: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = split.iter().sum();
    if split.iter().any(|s| !s.is_finite() || *s < 0.0) || !(total > 0.0) {
        return Err(Error::Config(format!("invalid split fractions {split:?}")));
    }
    let train = ((split[0] / total) * n as f64).round() as usize;
    let val = (((split[1] / total) * n as f64).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

/// The manifest a configuration produces, without touching the filesystem.
pub fn plan_corpus(config: &CorpusConfig) -> Result<Manifest> {
    let n = config.total();
    let sizes = split_sizes(n, config.split)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.master_seed));
    let mut split_of = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut entries = Vec::with_capacity(n);
    for tc in &config.counts {
        for _ in 0..tc.count {
            let g = entries.len();
            let id = format!("{:05}_{}", g, tc.template);
            entries.push(ManifestEntry {
                gaag_path: format!("gaag/{id}.json"),
                id,
                template: tc.template,
                seed: derive_seed(config.master_seed, g as u64),
                shape_label: tc.template.shape_class().id(),
                split: split_of[g],
            });
        }
    }
    Ok(Manifest { version: MANIFEST_VERSION.into(), master_seed: config.master_seed, entries })
}

/// Generates every model, writes its gAAG and the manifest under `out_dir`.
pub fn generate_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    let manifest = plan_corpus(config)?;
    fs::create_dir_all(out_dir.join("gaag")).map_err(|e| Error::io(out_dir, e))?;
    for e in &manifest.entries {
        let g = build_gaag(&generate_model(e.template, e.seed)?)?;
        write_gaag(&g, &out_dir.join(&e.gaag_path))?;
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version '{}'", m.version)));
        }
        Ok(m)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// A labeled graph ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub graph: Gaag,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self { root: root.to_path_buf(), manifest: Manifest::load(&root.join(MANIFEST_FILE))? })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        Ok(Sample { id: entry.id.clone(), graph: read_gaag(&self.root.join(&entry.gaag_path))? })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.split(split).map(|e| self.load(e)).collect()
    }
}

/// Builds the samples of a manifest in memory (no files involved).
pub fn materialize<'a>(entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<Vec<Sample>> {
    entries
        .into_iter()
        .map(|e| Ok(Sample { id: e.id.clone(), graph: build_gaag(&generate_model(e.template, e.seed)?)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn counts(m: &Manifest) -> [usize; 3] {
        [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).count())
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let m = plan_corpus(&CorpusConfig { counts: vec![TemplateCount { template: Template::Box, count: 100 }], split: [0.7, 0.15, 0.15], master_seed: 3 }).unwrap();
        assert_eq!(counts(&m), [70, 15, 15]);
        let ids: HashSet<_> = m.entries.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 100);
        let m = plan_corpus(&CorpusConfig { counts: vec![TemplateCount { template: Template::Box, count: 10 }], split: [80.0, 10.0, 10.0], master_seed: 3 }).unwrap();
        assert_eq!(counts(&m), [8, 1, 1]);
    }

    #[test]
    fn corpus_on_disk_is_deterministic() {
        let cfg = CorpusConfig::uniform(1, [0.5, 0.25, 0.25], 42);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_corpus(&cfg, a.path()).unwrap();
        let mb = generate_corpus(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(fs::read(a.path().join(MANIFEST_FILE)).unwrap(), fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        let c = Corpus::open(a.path()).unwrap();
        let s = c.load(&c.manifest.entries[0]).unwrap();
        assert_eq!(s.graph.shape_label, Some(c.manifest.entries[0].shape_label));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, "x").unwrap();
        let cfg = CorpusConfig::uniform(1, [1.0, 0.0, 0.0], 0);
        assert!(matches!(generate_corpus(&cfg, &file), Err(Error::Io { .. })));
    }
}
