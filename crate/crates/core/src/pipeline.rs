//! Pipeline stages over any descriptor source: transform, projection and
//! vocabulary training, bundle encoding, and product-vocabulary statistics.

use std::time::Instant;

use log::info;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bow::{compute_idf, unique_assignments, BowMatrix, VocabularyBundle};
use crate::config::{PipelineConfig, VocabEntry};
use crate::descriptors::{
    power_law_descriptors, project_descriptors, sample_descriptors, train_descriptor_pca,
    ChannelManifest, DescriptorMatrix, DescriptorProjection,
};
use crate::error::{Error, Result};
use crate::reduction::{reduce_matrix, train_reduction_from_bow, ReductionOptions};
use crate::search::{mean_ap, GroundTruth, Index, MapReport};
use crate::synth::SynthImage;
use crate::vocabulary::{kmeans_train, quantize, Assignment, KMeansParams, Provenance, Vocabulary};

/// Anything that can hand out per-image, per-channel descriptors.
pub trait DescriptorSource: Sync {
    fn image_ids(&self) -> Vec<String>;
    fn load(&self, image: &str, channel: &str) -> Result<DescriptorMatrix>;
}

impl DescriptorSource for ChannelManifest {
    fn image_ids(&self) -> Vec<String> {
        self.images.clone()
    }

    fn load(&self, image: &str, channel: &str) -> Result<DescriptorMatrix> {
        self.load_descriptors(image, channel)
    }
}

/// In-memory images, e.g. a generated benchmark.
pub struct MemorySource<'a> {
    pub channels: &'a [String],
    pub images: &'a [SynthImage],
}

impl DescriptorSource for MemorySource<'_> {
    fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    fn load(&self, image: &str, channel: &str) -> Result<DescriptorMatrix> {
        let c = self
            .channels
            .iter()
            .position(|c| c == channel)
            .ok_or_else(|| Error::Data(format!("unknown channel {channel}")))?;
        self.images
            .iter()
            .find(|i| i.id == image)
            .map(|i| i.channels[c].clone())
            .ok_or_else(|| Error::Data(format!("unknown image {image}")))
    }
}

/// Logs wall time of a stage on drop.
pub struct StageTimer {
    name: String,
    start: Instant,
}

impl StageTimer {
    pub fn new(name: impl Into<String>) -> Self {
        StageTimer {
            name: name.into(),
            start: Instant::now(),
        }
    }
}

impl Drop for StageTimer {
    fn drop(&mut self) {
        info!("stage {} took {:.3}s", self.name, self.start.elapsed().as_secs_f64());
    }
}

/// Applies the entry's power law and then `projection`, if any.
pub fn transform(
    x: &DescriptorMatrix,
    entry: &VocabEntry,
    projection: Option<&DescriptorProjection>,
) -> Result<DescriptorMatrix> {
    let powered = match entry.power {
        Some(p) => power_law_descriptors(x, p)?,
        None => x.clone(),
    };
    match projection {
        Some(proj) => project_descriptors(&powered, proj),
        None => Ok(powered),
    }
}

/// Draws up to `max_rows` descriptors of `channel` from `src`, spread
/// evenly over images (a per-image quota, then a final uniform cut), and
/// transforms them. Deterministic for a seed.
pub fn sample_channel(
    src: &dyn DescriptorSource,
    channel: &str,
    max_rows: usize,
    seed: u64,
    entry: &VocabEntry,
    projection: Option<&DescriptorProjection>,
) -> Result<DescriptorMatrix> {
    let ids = src.image_ids();
    if ids.is_empty() {
        return Err(Error::Data("training source has no images".into()));
    }
    let quota = max_rows.div_ceil(ids.len()).max(1);
    let parts = ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let x = src.load(id, channel)?;
            let x = if x.n() > quota {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
                let mut rows = index::sample(&mut rng, x.n(), quota).into_vec();
                rows.sort_unstable();
                let data: Vec<f32> = rows.iter().flat_map(|&r| x.row(r).to_vec()).collect();
                DescriptorMatrix::new(x.d(), data)?
            } else {
                x
            };
            transform(&x, entry, projection)
        })
        .collect::<Result<Vec<_>>>()?;
    sample_descriptors(&parts, max_rows, seed)
}

/// Learns the entry's descriptor projection, if it asks for one.
pub fn train_projection(
    cfg: &PipelineConfig,
    i: usize,
    train: &dyn DescriptorSource,
) -> Result<Option<DescriptorProjection>> {
    let entry = &cfg.vocab[i];
    let Some(dim) = entry.pca_dim else {
        return Ok(None);
    };
    let _t = StageTimer::new(format!("train-desc-pca[{i}]"));
    let sample = sample_channel(train, &entry.channel, cfg.desc_pca_sample, cfg.entry_seed(i), entry, None)?;
    let mut proj = train_descriptor_pca(&sample, dim, &cfg.training_tag)?;
    proj.renormalize = entry.pca_renormalize;
    Ok(Some(proj))
}

pub fn train_vocabulary(
    cfg: &PipelineConfig,
    i: usize,
    train: &dyn DescriptorSource,
    projection: Option<&DescriptorProjection>,
) -> Result<Vocabulary> {
    let entry = &cfg.vocab[i];
    let _t = StageTimer::new(format!("train-vocab[{i}] k={}", entry.k));
    let seed = cfg.entry_seed(i);
    let sample = sample_channel(train, &entry.channel, cfg.kmeans_sample, seed, entry, projection)?;
    let params = KMeansParams {
        k: entry.k,
        seed,
        max_iters: cfg.kmeans_max_iters,
        tol: cfg.kmeans_tol,
        restarts: cfg.kmeans_restarts,
    };
    let provenance = Provenance {
        seed,
        transform: entry.transform_description(),
        channel: entry.channel.clone(),
        training_set: cfg.training_tag.clone(),
    };
    let run = kmeans_train(&sample, &params, provenance)?;
    info!(
        "vocab[{i}]: {} samples, {} iterations, objective {:.6e}{}",
        sample.n(),
        run.iterations,
        run.objective(),
        if run.converged { " (converged)" } else { "" }
    );
    Ok(run.vocabulary)
}

/// Everything needed to turn an image's descriptors into its BOW vector.
#[derive(Debug, Clone)]
pub struct BundleEncoder {
    pub entries: Vec<VocabEntry>,
    pub projections: Vec<Option<DescriptorProjection>>,
    pub bundle: VocabularyBundle,
    pub beta: f64,
}

impl BundleEncoder {
    /// Assembles the encoder; with `cfg.idf` the idf vectors are computed
    /// from the training source.
    pub fn new(
        cfg: &PipelineConfig,
        vocabularies: Vec<Vocabulary>,
        projections: Vec<Option<DescriptorProjection>>,
        train: Option<&dyn DescriptorSource>,
    ) -> Result<Self> {
        if projections.len() != vocabularies.len() || cfg.vocab.len() != vocabularies.len() {
            return Err(Error::Parameter(format!(
                "{} config entries, {} projections, {} vocabularies",
                cfg.vocab.len(),
                projections.len(),
                vocabularies.len()
            )));
        }
        let mut bundle = VocabularyBundle::with_weights(vocabularies, cfg.weights())?;
        for (i, v) in bundle.vocabularies.iter().enumerate() {
            if let Some(d) = projections[i].as_ref().map(|p| p.d_out) {
                if d != v.d() {
                    return Err(Error::Data(format!(
                        "vocab {i}: projection output {d} does not match vocabulary dimension {}",
                        v.d()
                    )));
                }
            }
        }
        let mut enc = BundleEncoder {
            entries: cfg.vocab.clone(),
            projections,
            bundle: bundle.clone(),
            beta: cfg.ssr_beta,
        };
        if cfg.idf {
            let train = train.ok_or_else(|| Error::Config("idf needs a training source".into()))?;
            let ids = train.image_ids();
            let per_image = ids
                .par_iter()
                .map(|id| enc.assign(train, id))
                .collect::<Result<Vec<_>>>()?;
            for (v, slot) in bundle.idf.iter_mut().enumerate() {
                let k = bundle.vocabularies[v].k();
                *slot = Some(compute_idf(per_image.iter().map(|a| a[v].word_ids.as_slice()), k));
            }
            enc.bundle = bundle;
        }
        Ok(enc)
    }

    /// One assignment per vocabulary for `image`.
    pub fn assign(&self, src: &dyn DescriptorSource, image: &str) -> Result<Vec<Assignment>> {
        self.entries
            .iter()
            .zip(&self.projections)
            .zip(&self.bundle.vocabularies)
            .map(|((entry, proj), vocab)| {
                let x = src.load(image, &entry.channel)?;
                quantize(&transform(&x, entry, proj.as_ref())?, vocab)
            })
            .collect()
    }

    /// Encodes every image of `src`, in source order.
    pub fn encode(&self, src: &dyn DescriptorSource) -> Result<BowMatrix> {
        let ids = src.image_ids();
        let vectors = ids
            .par_iter()
            .map(|id| {
                let a = self.assign(src, id)?;
                self.bundle.encode(id, &a, self.beta)
            })
            .collect::<Result<Vec<_>>>()?;
        BowMatrix::from_vectors(self.bundle.total_dim(), &vectors)
    }
}

/// Trains projections and vocabularies for every entry of `cfg`.
pub fn train_bundle(
    cfg: &PipelineConfig,
    train: &dyn DescriptorSource,
) -> Result<BundleEncoder> {
    let mut projections = Vec::with_capacity(cfg.vocab.len());
    let mut vocabularies = Vec::with_capacity(cfg.vocab.len());
    for i in 0..cfg.vocab.len() {
        let proj = train_projection(cfg, i, train)?;
        vocabularies.push(train_vocabulary(cfg, i, train, proj.as_ref())?);
        projections.push(proj);
    }
    BundleEncoder::new(cfg, vocabularies, projections, Some(train))
}

/// Product-vocabulary cell counts over all descriptors of `src` as
/// vocabularies are appended one at a time: entry `v` counts distinct
/// tuples over the first `v + 1` vocabularies.
pub fn unique_assignment_curve(enc: &BundleEncoder, src: &dyn DescriptorSource) -> Result<Vec<usize>> {
    let ids = src.image_ids();
    let per_image = ids
        .par_iter()
        .map(|id| enc.assign(src, id))
        .collect::<Result<Vec<_>>>()?;
    let n_vocab = enc.bundle.vocabularies.len();
    let mut columns: Vec<Vec<u32>> = vec![Vec::new(); n_vocab];
    for (id, a) in ids.iter().zip(&per_image) {
        let n = a[0].word_ids.len();
        if a.iter().any(|x| x.word_ids.len() != n) {
            return Err(Error::Data(format!(
                "image {id}: channels have different descriptor counts"
            )));
        }
        for (col, x) in columns.iter_mut().zip(a) {
            col.extend_from_slice(&x.word_ids);
        }
    }
    (1..=n_vocab)
        .map(|v| {
            let slices: Vec<&[u32]> = columns[..v].iter().map(Vec::as_slice).collect();
            unique_assignments(&slices)
        })
        .collect()
}

/// Encodes `train` and `db`, learns the reduction to `d_out` on the
/// training vectors, and scores the reduced database against `gt`.
pub fn evaluate(
    enc: &BundleEncoder,
    d_out: usize,
    train: &dyn DescriptorSource,
    db: &dyn DescriptorSource,
    gt: &GroundTruth,
) -> Result<MapReport> {
    let model = train_reduction_from_bow(&enc.encode(train)?, d_out, &ReductionOptions::default())?;
    let index = Index::build(reduce_matrix(&enc.encode(db)?, &model)?)?;
    mean_ap(&index, gt, None)
}
