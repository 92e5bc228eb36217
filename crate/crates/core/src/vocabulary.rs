//! Visual vocabularies: seeded k-means training and exhaustive quantization.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, Decoder, Encoder};
use crate::descriptors::DescriptorMatrix;
use crate::error::{Error, Result};

const VOCABULARY_MAGIC: &[u8; 4] = b"MVVC";

/// Where a vocabulary came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    /// Descriptor transform chain, e.g. `power:0.5` or `none`.
    pub transform: String,
    pub channel: String,
    pub training_set: String,
}

/// `k x d` centroid matrix (row-major) plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    k: usize,
    d: usize,
    centroids: Vec<f32>,
    norms: Vec<f64>,
    pub provenance: Provenance,
}

impl Vocabulary {
    pub fn new(d: usize, centroids: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if d == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(d) {
            return Err(Error::Parameter(format!(
                "{} centroid values do not form k >= 1 rows of length {d}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite centroid value".into()));
        }
        let norms = centroids
            .chunks_exact(d)
            .map(|c| c.iter().map(|&v| v as f64 * v as f64).sum())
            .collect();
        Ok(Vocabulary {
            k: centroids.len() / d,
            d,
            centroids,
            norms,
            provenance,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.d..(j + 1) * self.d]
    }

    /// Index of the nearest centroid to `x`, lowest index on ties. Distances
    /// are `|x|^2 - 2 x.c + |c|^2` accumulated in f64.
    pub fn nearest(&self, x: &[f32]) -> (u32, f64) {
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let xx: f64 = xs.iter().map(|v| v * v).sum();
        let mut best = (0u32, f64::INFINITY);
        for (j, c) in self.centroids.chunks_exact(self.d).enumerate() {
            let dist = xx - 2.0 * dot_f64_f32(&xs, c) + self.norms[j];
            if dist < best.1 {
                best = (j as u32, dist);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(VOCABULARY_MAGIC);
        enc.u32(self.k as u32);
        enc.u32(self.d as u32);
        enc.u64(self.provenance.seed);
        enc.str(&self.provenance.transform);
        enc.str(&self.provenance.channel);
        enc.str(&self.provenance.training_set);
        enc.f32s(self.centroids.iter().copied());
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::with_header(bytes, VOCABULARY_MAGIC, "vocabulary file")?;
        let k = dec.u32()?;
        let d = dec.u32()?;
        let seed = dec.u64()?;
        let transform = dec.str()?;
        let channel = dec.str()?;
        let training_set = dec.str()?;
        if k == 0 || d == 0 {
            return Err(Error::Corruption(format!("vocabulary file: k={k} d={d}")));
        }
        let centroids = dec.f32s(binio::checked_len(k as u64, d as u64, "vocabulary file")?)?;
        dec.finish()?;
        Vocabulary::new(
            d as usize,
            centroids,
            Provenance {
                seed,
                transform,
                channel,
                training_set,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Four independent partial sums in a fixed order: deterministic, and
/// shorter dependency chains than a single running sum.
fn dot_f64_f32(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (l, s) in acc.iter_mut().enumerate() {
            *s += a[4 * i + l] * b[4 * i + l] as f64;
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sq_dist(x: &[f32], c: &[f32]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let t = a as f64 - b as f64;
            t * t
        })
        .sum()
}

/// Visual word ids for one descriptor set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub image_id: String,
    pub channel: String,
    pub word_ids: Vec<u32>,
}

/// Exhaustive nearest-centroid assignment: exactly `k` comparisons per
/// descriptor, parallel over descriptors.
pub fn quantize(x: &DescriptorMatrix, v: &Vocabulary) -> Result<Assignment> {
    if x.d() != v.d() {
        return Err(Error::Parameter(format!(
            "descriptor dimension {} does not match vocabulary dimension {}",
            x.d(),
            v.d()
        )));
    }
    Ok(Assignment {
        image_id: x.image_id.clone(),
        channel: x.channel.clone(),
        word_ids: assign_rows(x, v),
    })
}

fn assign_rows(x: &DescriptorMatrix, v: &Vocabulary) -> Vec<u32> {
    (0..x.n())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| v.nearest(x.row(i)).0)
        .collect()
}

/// Sum over descriptors of the squared distance to the closest centroid.
pub fn kmeans_objective(x: &DescriptorMatrix, v: &Vocabulary) -> Result<f64> {
    if x.d() != v.d() {
        return Err(Error::Parameter("dimension mismatch".into()));
    }
    let per_row: Vec<f64> = (0..x.n())
        .into_par_iter()
        .map(|i| {
            (0..v.k())
                .map(|j| sq_dist(x.row(i), v.centroid(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(per_row.iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    /// Independent seeded runs; the lowest final objective wins.
    pub restarts: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iters: 25,
            tol: 1e-4,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub vocabulary: Vocabulary,
    /// Word id of every training row under the final centroids.
    pub assignment: Vec<u32>,
    /// Objective after each assignment step of the winning run, starting with
    /// the seeded initialization.
    pub objective_history: Vec<f64>,
    /// Lloyd iterations (centroid updates) performed by the winning run.
    pub iterations: usize,
    /// True when the last update left every assignment unchanged.
    pub converged: bool,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap()
    }
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Deterministic for fixed inputs: the RNG is a seeded ChaCha stream and all
/// reductions run in a fixed index order, so the thread count never changes
/// the result.
pub fn kmeans_train(
    x: &DescriptorMatrix,
    params: &KMeansParams,
    provenance: Provenance,
) -> Result<KMeansResult> {
    let k = params.k;
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    if x.n() < k {
        return Err(Error::Parameter(format!(
            "k-means needs at least k={k} samples, got {}",
            x.n()
        )));
    }
    if params.tol.is_nan() || params.tol < 0.0 {
        return Err(Error::Parameter(format!("tolerance {} must be >= 0", params.tol)));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..params.restarts.max(1) {
        let seed = params.seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut prov = provenance.clone();
        prov.seed = params.seed;
        let run = lloyd(x, k, seed, params, prov)?;
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn lloyd(
    x: &DescriptorMatrix,
    k: usize,
    seed: u64,
    params: &KMeansParams,
    provenance: Provenance,
) -> Result<KMeansResult> {
    let d = x.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocabulary::new(d, kmeans_pp_init(x, k, &mut rng)?, provenance)?;
    let mut assignment = assign_rows(x, &vocab);
    let mut objective = assigned_objective(x, &vocab, &assignment);
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iters {
        let centroids = update_centroids(x, k, &assignment);
        vocab = Vocabulary::new(d, centroids, vocab.provenance.clone())?;
        let next = assign_rows(x, &vocab);
        let next_objective = assigned_objective(x, &vocab, &next);
        iterations += 1;
        history.push(next_objective);
        let stable = next == assignment;
        assignment = next;
        let decrease = objective - next_objective;
        objective = next_objective;
        if stable {
            converged = true;
            break;
        }
        if objective == 0.0 || decrease < params.tol * (objective + decrease) {
            break;
        }
    }
    Ok(KMeansResult {
        vocabulary: vocab,
        assignment,
        objective_history: history,
        iterations,
        converged,
    })
}

fn assigned_objective(x: &DescriptorMatrix, v: &Vocabulary, assignment: &[u32]) -> f64 {
    let per_row: Vec<f64> = (0..x.n())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| sq_dist(x.row(i), v.centroid(assignment[i] as usize)))
        .collect();
    per_row.iter().sum()
}

/// D^2-weighted seeding. Fails when the sample has fewer than `k` distinct
/// rows, since distinct centroids are then impossible.
fn kmeans_pp_init(x: &DescriptorMatrix, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let n = x.n();
    let mut centroids = Vec::with_capacity(k * x.d());
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(x.row(first));
    let mut closest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(x.row(i), x.row(first)))
        .collect();
    for picked in 1..k {
        let total: f64 = closest.iter().sum();
        if total <= 0.0 {
            return Err(Error::Data(format!(
                "sample has only {picked} distinct descriptors, fewer than k={k}"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (i, &w) in closest.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                choice = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let c = choice.expect("positive total weight");
        let row = x.row(c).to_vec();
        closest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, best)| *best = best.min(sq_dist(x.row(i), &row)));
        centroids.extend_from_slice(&row);
    }
    Ok(centroids)
}

/// Cluster means, summed per cluster in ascending row order. An empty
/// cluster is re-seeded at the row farthest from its new centroid (lowest
/// index on ties) that does not coincide with an existing centroid.
fn update_centroids(x: &DescriptorMatrix, k: usize, assignment: &[u32]) -> Vec<f32> {
    let d = x.d();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &w) in assignment.iter().enumerate() {
        members[w as usize].push(i);
    }
    let means: Vec<Option<Vec<f32>>> = members
        .par_iter()
        .map(|rows| {
            if rows.is_empty() {
                return None;
            }
            let mut sum = vec![0.0f64; d];
            for &i in rows {
                sum.iter_mut().zip(x.row(i)).for_each(|(s, &v)| *s += v as f64);
            }
            let n = rows.len() as f64;
            Some(sum.iter().map(|s| (s / n) as f32).collect())
        })
        .collect();

    let mut centroids = vec![0.0f32; k * d];
    for (j, m) in means.iter().enumerate() {
        if let Some(m) = m {
            centroids[j * d..(j + 1) * d].copy_from_slice(m);
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&j| means[j].is_none()).collect();
    if empty.is_empty() {
        return centroids;
    }

    let mut dist: Vec<f64> = (0..x.n())
        .map(|i| {
            let w = assignment[i] as usize;
            sq_dist(x.row(i), &centroids[w * d..(w + 1) * d])
        })
        .collect();
    let mut filled: Vec<usize> = (0..k).filter(|&j| means[j].is_some()).collect();
    for j in empty {
        let mut order: Vec<usize> = (0..x.n()).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let pick = order.into_iter().find(|&i| {
            dist[i] > 0.0
                && filled
                    .iter()
                    .all(|&f| &centroids[f * d..(f + 1) * d] != x.row(i))
        });
        if let Some(i) = pick {
            centroids[j * d..(j + 1) * d].copy_from_slice(x.row(i));
            dist[i] = 0.0;
            filled.push(j);
        }
    }
    centroids
}
