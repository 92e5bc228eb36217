//! Planted retrieval benchmark.
//!
//! Descriptors are SIFT-like (non-negative, unit norm, skewed components).
//! A pool of appearance patterns plays the role of the visual world. Each
//! planted group gets its own set of latent features (templates drawn around
//! the patterns); every image of the group observes those templates through
//! independent noise, with a fraction of its descriptors replaced by clutter.
//! Distractor images contain clutter only. The first image of each group is
//! a query whose positives are the rest of its group.
//!
//! Channels model measurement-region variants: a channel with relative scale
//! `s` mixes `(s - 1)` of a per-feature context vector into the template, so
//! corresponding descriptors differ systematically across channels while
//! describing the same keypoints in the same order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::descriptors::{save_descriptors, Channel, ChannelManifest, DescriptorMatrix};
use crate::error::{Error, Result};
use crate::search::{GroundTruth, QueryTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Database size, planted groups included.
    pub n_images: usize,
    pub n_queries: usize,
    pub positives_per_query: usize,
    /// Independent training images (vocabularies and reductions are learned
    /// here, never on the database).
    pub n_train_images: usize,
    pub descriptors_per_image: usize,
    pub dim: usize,
    /// Number of appearance patterns (cluster count of the planted model).
    pub n_patterns: usize,
    /// Spread of latent templates around their pattern.
    pub template_spread: f64,
    /// Observation noise of a template in one image.
    pub spread: f64,
    /// Fraction of a planted image's descriptors replaced by clutter.
    pub clutter: f64,
    pub channels: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 2015,
            n_images: 500,
            n_queries: 20,
            positives_per_query: 4,
            n_train_images: 400,
            descriptors_per_image: 120,
            dim: 32,
            n_patterns: 64,
            template_spread: 0.6,
            spread: 0.3,
            clutter: 0.35,
            channels: vec!["r1.00".to_string()],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_images", self.n_images),
            ("n_queries", self.n_queries),
            ("positives_per_query", self.positives_per_query),
            ("n_train_images", self.n_train_images),
            ("descriptors_per_image", self.descriptors_per_image),
            ("dim", self.dim),
            ("n_patterns", self.n_patterns),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be >= 1")));
        }
        let planted = self.n_queries * (self.positives_per_query + 1);
        if planted > self.n_images {
            return Err(Error::Parameter(format!(
                "{} queries with {} positives need {planted} images, only {} requested",
                self.n_queries, self.positives_per_query, self.n_images
            )));
        }
        for (name, v) in [
            ("template_spread", self.template_spread),
            ("spread", self.spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Parameter("clutter must lie in [0, 1]".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Parameter("at least one channel required".into()));
        }
        Ok(())
    }
}

/// One image with one descriptor matrix per channel (same keypoint order).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub channels: Vec<DescriptorMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub channels: Vec<String>,
    pub train: Vec<SynthImage>,
    pub database: Vec<SynthImage>,
    pub ground_truth: GroundTruth,
}

/// File names written by [`SynthData::write`].
pub const DB_MANIFEST: &str = "manifest.tsv";
pub const TRAIN_MANIFEST: &str = "train_manifest.tsv";
pub const GROUND_TRUTH: &str = "ground_truth.tsv";

impl SynthData {
    /// Writes descriptor files under `db/` and `train/`, the two manifests,
    /// and the ground truth.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (sub, images, manifest) in [
            ("db", &self.database, DB_MANIFEST),
            ("train", &self.train, TRAIN_MANIFEST),
        ] {
            let sub_dir = dir.join(sub);
            fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
            let mut m = ChannelManifest::new(dir);
            for img in images {
                for (label, x) in self.channels.iter().zip(&img.channels) {
                    let rel = PathBuf::from(sub).join(format!("{}_{label}.mvsd", img.id));
                    save_descriptors(&dir.join(&rel), x)?;
                    m.insert(&img.id, label, rel)?;
                }
            }
            m.save(&dir.join(manifest))?;
        }
        self.ground_truth.save(&dir.join(GROUND_TRUTH))
    }
}

struct Feature {
    template: Vec<f64>,
    context: Vec<f64>,
}

struct World<'a> {
    spec: &'a SynthSpec,
    patterns: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

fn normalize_nonneg(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

impl World<'_> {
    fn feature(&self, rng: &mut ChaCha8Rng) -> Feature {
        let d = self.spec.dim;
        let jitter = self.spec.template_spread / (d as f64).sqrt();
        let p = &self.patterns[rng.random_range(0..self.patterns.len())];
        let noise = gaussian(rng, d, jitter);
        let template = normalize_nonneg(p.iter().zip(&noise).map(|(a, b)| a + b).collect());
        let q = &self.patterns[rng.random_range(0..self.patterns.len())];
        let noise = gaussian(rng, d, jitter);
        let context = normalize_nonneg(q.iter().zip(&noise).map(|(a, b)| a + b).collect());
        Feature { template, context }
    }

    /// One observation of `f` in every channel. Noise is shared across
    /// channels for 80% of its variance.
    fn observe(&self, f: &Feature, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let d = self.spec.dim;
        let sigma = self.spec.spread / (d as f64).sqrt();
        let shared = gaussian(rng, d, sigma * 0.8f64.sqrt());
        self.scales
            .iter()
            .map(|&s| {
                let own = gaussian(rng, d, sigma * 0.2f64.sqrt());
                let v = (0..d)
                    .map(|j| f.template[j] + (s - 1.0) * f.context[j] + shared[j] + own[j])
                    .collect();
                normalize_nonneg(v).into_iter().map(|x| x as f32).collect()
            })
            .collect()
    }

    /// Builds an image from `(template index or clutter)` slots.
    fn image(&self, id: String, group: Option<&[Feature]>, rng: &mut ChaCha8Rng) -> Result<SynthImage> {
        let m = self.spec.descriptors_per_image;
        let mut rows: Vec<Vec<f32>> = vec![Vec::with_capacity(m * self.spec.dim); self.scales.len()];
        for i in 0..m {
            let planted = group.filter(|_| !rng.random_bool(self.spec.clutter));
            let obs = match planted {
                Some(features) => self.observe(&features[i], rng),
                None => {
                    let f = self.feature(rng);
                    self.observe(&f, rng)
                }
            };
            for (ch, o) in rows.iter_mut().zip(obs) {
                ch.extend(o);
            }
        }
        let channels = rows
            .into_iter()
            .zip(&self.spec.channels)
            .map(|(data, label)| Ok(DescriptorMatrix::new(self.spec.dim, data)?.with_ids(&id, label)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthImage { id, channels })
    }

    /// `n` images of which the ones listed in `groups` share latent features.
    fn images(
        &self,
        prefix: &str,
        n: usize,
        groups: &[Vec<usize>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SynthImage>> {
        let mut membership: Vec<Option<usize>> = vec![None; n];
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                membership[i] = Some(g);
            }
        }
        let group_features: Vec<Vec<Feature>> = groups
            .iter()
            .map(|_| (0..self.spec.descriptors_per_image).map(|_| self.feature(rng)).collect())
            .collect();
        (0..n)
            .map(|i| {
                let features = membership[i].map(|g| group_features[g].as_slice());
                self.image(format!("{prefix}{i:05}"), features, rng)
            })
            .collect()
    }
}

/// Generates a benchmark. Identical specs give bit-identical data.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    // Squared gaussians give the heavy-tailed, non-negative components a
    // gradient histogram has.
    let patterns = (0..spec.n_patterns)
        .map(|_| normalize_nonneg(gaussian(&mut rng, d, 1.0).iter().map(|x| x * x).collect()))
        .collect();
    let scales = spec
        .channels
        .iter()
        .map(|c| Channel::new(c).scale.unwrap_or(1.0))
        .collect();
    let world = World {
        spec,
        patterns,
        scales,
    };

    let group_size = spec.positives_per_query + 1;
    let mut order: Vec<usize> = (0..spec.n_images).collect();
    order.shuffle(&mut rng);
    let db_groups: Vec<Vec<usize>> = order
        .chunks(group_size)
        .take(spec.n_queries)
        .map(|c| c.to_vec())
        .collect();
    let database = world.images("img", spec.n_images, &db_groups, &mut rng)?;

    // Half of the training images come in planted groups so co-occurrence
    // statistics are learnable.
    let mut order: Vec<usize> = (0..spec.n_train_images).collect();
    order.shuffle(&mut rng);
    let train_groups: Vec<Vec<usize>> = order
        .chunks_exact(group_size)
        .take(spec.n_train_images / (2 * group_size))
        .map(|c| c.to_vec())
        .collect();
    let train = world.images("train", spec.n_train_images, &train_groups, &mut rng)?;

    let queries = db_groups
        .iter()
        .map(|members| {
            let id = |i: &usize| database[*i].id.clone();
            QueryTruth::new(
                &id(&members[0]),
                members[1..].iter().map(id),
                Vec::<String>::new(),
                true,
            )
        })
        .collect();
    Ok(SynthData {
        channels: spec.channels.clone(),
        train,
        database,
        ground_truth: GroundTruth { queries },
    })
}
