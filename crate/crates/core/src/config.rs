//! Pipeline configuration (TOML).
//!
//! ```toml
//! manifest = "manifest.tsv"              # database descriptors
//! train_manifest = "train_manifest.tsv"  # vocabulary / PCA training set
//! ground_truth = "ground_truth.tsv"
//! output_dir = "out"
//! d_out = 128
//!
//! [[vocab]]
//! channel = "r1.00"
//! k = 256
//! seed = 1
//! power = 0.5
//! ```
//!
//! Relative paths are resolved against the directory holding the config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `ln k` per block, or uniform when all vocabularies share one size.
    #[default]
    Auto,
    Log,
    Uniform,
}

/// One vocabulary of the bundle and the descriptor transform chain feeding
/// it: power law, then projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabEntry {
    #[serde(default = "default_channel")]
    pub channel: String,
    pub k: usize,
    /// Defaults to the global seed plus the entry's position.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Component-wise power in (0, 1]; 1 means plain row normalization.
    #[serde(default)]
    pub power: Option<f64>,
    /// Learn a PCA projection of this many dimensions on the training set.
    #[serde(default)]
    pub pca_dim: Option<usize>,
    /// Use a previously trained projection file instead.
    #[serde(default)]
    pub projection: Option<PathBuf>,
    #[serde(default = "yes")]
    pub pca_renormalize: bool,
    /// Overrides the bundle weighting for this block.
    #[serde(default)]
    pub weight: Option<f64>,
}

fn default_channel() -> String {
    "r1.00".to_string()
}

fn yes() -> bool {
    true
}

impl VocabEntry {
    pub fn new(channel: &str, k: usize) -> Self {
        VocabEntry {
            channel: channel.to_string(),
            k,
            seed: None,
            power: None,
            pca_dim: None,
            projection: None,
            pca_renormalize: true,
            weight: None,
        }
    }

    /// Human-readable transform chain, stored as vocabulary provenance.
    pub fn transform_description(&self) -> String {
        let mut parts = Vec::new();
        if let Some(p) = self.power {
            parts.push(format!("power:{p}"));
        }
        if let Some(dim) = self.pca_dim {
            parts.push(format!("pca:{dim}"));
        }
        if let Some(path) = &self.projection {
            parts.push(format!("projection:{}", path.display()));
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("|")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    /// Defaults to the database manifest.
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    /// Per-query descriptor sets (e.g. cropped query regions).
    #[serde(default)]
    pub query_manifest: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_beta")]
    pub ssr_beta: f64,
    #[serde(default)]
    pub idf: bool,
    #[serde(default = "default_d_out")]
    pub d_out: usize,
    #[serde(default = "default_training_tag")]
    pub training_tag: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_max_iters: usize,
    #[serde(default = "default_kmeans_tol")]
    pub kmeans_tol: f64,
    #[serde(default = "default_one")]
    pub kmeans_restarts: usize,
    /// Cap on descriptors sampled from the training set for k-means.
    #[serde(default = "default_kmeans_sample")]
    pub kmeans_sample: usize,
    /// Cap on descriptors sampled for learning descriptor projections.
    #[serde(default = "default_pca_sample")]
    pub desc_pca_sample: usize,
    pub vocab: Vec<VocabEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_beta() -> f64 {
    0.5
}
fn default_d_out() -> usize {
    128
}
fn default_training_tag() -> String {
    "train".to_string()
}
fn default_kmeans_iters() -> usize {
    25
}
fn default_kmeans_tol() -> f64 {
    1e-4
}
fn default_one() -> usize {
    1
}
fn default_kmeans_sample() -> usize {
    200_000
}
fn default_pca_sample() -> usize {
    100_000
}

/// Descriptor exponents of the power-law vocabulary family.
pub const ROOTSIFT_POWERS: [f64; 4] = [1.0, 0.4, 0.5, 0.6];

impl PipelineConfig {
    pub fn new(manifest: impl Into<PathBuf>, vocab: Vec<VocabEntry>) -> Self {
        PipelineConfig {
            manifest: manifest.into(),
            train_manifest: None,
            query_manifest: None,
            ground_truth: None,
            output_dir: default_output_dir(),
            ssr_beta: default_beta(),
            idf: false,
            d_out: default_d_out(),
            training_tag: default_training_tag(),
            seed: 0,
            weighting: Weighting::Auto,
            kmeans_max_iters: default_kmeans_iters(),
            kmeans_tol: default_kmeans_tol(),
            kmeans_restarts: 1,
            kmeans_sample: default_kmeans_sample(),
            desc_pca_sample: default_pca_sample(),
            vocab,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check_values()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    pub fn train_manifest_path(&self) -> PathBuf {
        self.resolve(self.train_manifest.as_ref().unwrap_or(&self.manifest))
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn entry_seed(&self, i: usize) -> u64 {
        self.vocab[i].seed.unwrap_or(self.seed.wrapping_add(i as u64))
    }

    pub fn ks(&self) -> Vec<usize> {
        self.vocab.iter().map(|v| v.k).collect()
    }

    /// Block weights per the weighting policy and per-entry overrides.
    pub fn weights(&self) -> Vec<f64> {
        let ks = self.ks();
        let base = match self.weighting {
            Weighting::Auto => crate::bow::default_weights(&ks),
            Weighting::Log => ks.iter().map(|&k| (k as f64).ln()).collect(),
            Weighting::Uniform => vec![1.0; ks.len()],
        };
        self.vocab
            .iter()
            .zip(base)
            .map(|(v, w)| v.weight.unwrap_or(w))
            .collect()
    }

    /// Value checks that need no file system access.
    pub fn check_values(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab.is_empty() {
            return bad("at least one [[vocab]] entry is required".into());
        }
        if !(0.0..=1.0).contains(&self.ssr_beta) {
            return bad(format!("ssr_beta {} outside [0, 1]", self.ssr_beta));
        }
        if self.d_out == 0 {
            return bad("d_out must be >= 1".into());
        }
        let total: usize = self.ks().iter().sum();
        if self.d_out > total {
            return bad(format!("d_out {} exceeds total vocabulary size {total}", self.d_out));
        }
        if self.kmeans_sample == 0 || self.desc_pca_sample == 0 {
            return bad("sample sizes must be >= 1".into());
        }
        for (i, v) in self.vocab.iter().enumerate() {
            if v.k == 0 {
                return bad(format!("vocab {i}: k must be >= 1"));
            }
            if let Some(p) = v.power {
                if !(p > 0.0 && p <= 1.0) {
                    return bad(format!("vocab {i}: power {p} outside (0, 1]"));
                }
            }
            if v.pca_dim.is_some() && v.projection.is_some() {
                return bad(format!("vocab {i}: pca_dim and projection are exclusive"));
            }
            if v.pca_dim == Some(0) {
                return bad(format!("vocab {i}: pca_dim must be >= 1"));
            }
        }
        if let Some(w) = self.weights().iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return bad(format!(
                "block weight {w} is not positive; set explicit weights or weighting = \"uniform\""
            ));
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn check_files(&self) -> Result<()> {
        let mut paths = vec![self.manifest_path(), self.train_manifest_path()];
        paths.extend(self.query_manifest.iter().map(|p| self.resolve(p)));
        paths.extend(self.ground_truth.iter().map(|p| self.resolve(p)));
        paths.extend(self.vocab.iter().filter_map(|v| v.projection.as_ref()).map(|p| self.resolve(p)));
        match paths.iter().find(|p| !p.is_file()) {
            Some(p) => Err(Error::Config(format!("missing input file {}", p.display()))),
            None => Ok(()),
        }
    }
}
