//! Local descriptor sets: storage, the per-channel manifest, and the
//! descriptor-level transforms (power law, learned linear projection).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg;

const DESCRIPTOR_MAGIC: &[u8; 4] = b"MVSD";
const PROJECTION_MAGIC: &[u8; 4] = b"MVPJ";

/// Eigenvalues at or below this fraction of the largest one count as zero
/// when checking the rank of a descriptor sample.
const RANK_TOL: f64 = 1e-10;

/// `n x d` row-major matrix of local descriptors for one image and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    pub image_id: String,
    pub channel: String,
    d: usize,
    data: Vec<f32>,
}

impl DescriptorMatrix {
    pub fn new(d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("descriptor dimension must be >= 1".into()));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::Parameter(format!(
                "{} values do not form rows of length {d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite descriptor value at row {}",
                pos / d
            )));
        }
        Ok(DescriptorMatrix {
            image_id: String::new(),
            channel: String::new(),
            d,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or_else(|| {
            Error::Parameter("cannot infer dimension from zero rows".into())
        })?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Parameter("rows have different lengths".into()));
        }
        Self::new(d, rows.concat())
    }

    pub fn empty(d: usize) -> Result<Self> {
        Self::new(d, Vec::new())
    }

    pub fn with_ids(mut self, image_id: impl Into<String>, channel: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self.channel = channel.into();
        self
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d)
    }

    pub fn zero_rows(&self) -> usize {
        self.rows().filter(|r| r.iter().all(|&x| x == 0.0)).count()
    }

    /// True when every non-zero row has unit L2 norm within `tol`.
    pub fn is_l2_normalized(&self, tol: f64) -> bool {
        self.rows().all(|r| {
            let n = row_norm(r);
            n == 0.0 || (n - 1.0).abs() <= tol
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(DESCRIPTOR_MAGIC);
        enc.u64(self.n() as u64);
        enc.u32(self.d as u32);
        enc.f32s(self.data.iter().copied());
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::with_header(bytes, DESCRIPTOR_MAGIC, "descriptor file")?;
        let n = dec.u64()?;
        let d = dec.u32()?;
        if d == 0 {
            return Err(Error::Corruption("descriptor file: dimension 0".into()));
        }
        let data = dec.f32s(binio::checked_len(n, d as u64, "descriptor file")?)?;
        dec.finish()?;
        Self::new(d as usize, data)
    }
}

fn row_norm(r: &[f32]) -> f64 {
    r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Writes `values` (computed in f64) as an L2-normalized f32 row. Zero rows
/// stay zero.
fn push_normalized(out: &mut Vec<f32>, values: &[f64]) {
    let n = linalg::norm(values);
    if n > 0.0 {
        out.extend(values.iter().map(|v| (v / n) as f32));
    } else {
        out.extend(std::iter::repeat_n(0.0f32, values.len()));
    }
}

pub fn load_descriptors(path: &Path) -> Result<DescriptorMatrix> {
    DescriptorMatrix::from_bytes(&binio::read_file(path)?)
}

pub fn save_descriptors(path: &Path, x: &DescriptorMatrix) -> Result<()> {
    fs::write(path, x.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Sign-preserving power law `|x|^beta * sign(x)` on every component,
/// followed by row L2 normalization.
pub fn power_law_descriptors(x: &DescriptorMatrix, beta: f64) -> Result<DescriptorMatrix> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Parameter(format!(
            "descriptor power must lie in (0, 1], got {beta}"
        )));
    }
    let rows: Vec<Vec<f32>> = x
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let powered: Vec<f64> = r
                .iter()
                .map(|&v| (v as f64).abs().powf(beta).copysign(v as f64))
                .collect();
            let mut out = Vec::with_capacity(r.len());
            push_normalized(&mut out, &powered);
            out
        })
        .collect();
    Ok(DescriptorMatrix {
        image_id: x.image_id.clone(),
        channel: x.channel.clone(),
        d: x.d,
        data: rows.concat(),
    })
}

/// Linear map `x -> basis^T (x - mean)` learned by PCA on a descriptor sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorProjection {
    pub mean: Vec<f64>,
    /// `d x d_out`, column-major; columns are orthonormal.
    pub basis: Vec<f64>,
    pub d: usize,
    pub d_out: usize,
    /// Training-set tag. Not persisted in the file format.
    pub source: String,
    pub renormalize: bool,
    /// Eigenvalues of the kept components (1/n covariance); empty after load.
    pub eigenvalues: Vec<f64>,
}

impl DescriptorProjection {
    pub fn column(&self, j: usize) -> &[f64] {
        &self.basis[j * self.d..(j + 1) * self.d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(PROJECTION_MAGIC);
        enc.u32(self.d as u32);
        enc.u32(self.d_out as u32);
        enc.u8(self.renormalize as u8);
        enc.f32s(self.mean.iter().map(|&v| v as f32));
        enc.f32s(self.basis.iter().map(|&v| v as f32));
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::with_header(bytes, PROJECTION_MAGIC, "projection file")?;
        let d = dec.u32()? as usize;
        let d_out = dec.u32()? as usize;
        let renormalize = match dec.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Corruption(format!("projection file: renormalize flag {v}"))),
        };
        let mean = dec.f32s(d)?;
        let basis = dec.f32s(binio::checked_len(d as u64, d_out as u64, "projection file")?)?;
        dec.finish()?;
        if mean.iter().chain(&basis).any(|v| !v.is_finite()) {
            return Err(Error::Data("projection file: non-finite values".into()));
        }
        Ok(DescriptorProjection {
            mean: mean.into_iter().map(f64::from).collect(),
            basis: basis.into_iter().map(f64::from).collect(),
            d,
            d_out,
            source: String::new(),
            renormalize,
            eigenvalues: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut p = Self::from_bytes(&binio::read_file(path)?)?;
        p.source = path.display().to_string();
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Learns a `d_out`-dimensional PCA projection from a descriptor sample.
///
/// Covariance uses the 1/n convention. Each basis vector is signed so that
/// its largest-magnitude component is positive. The returned projection
/// renormalizes its outputs.
pub fn train_descriptor_pca(
    sample: &DescriptorMatrix,
    d_out: usize,
    source: &str,
) -> Result<DescriptorProjection> {
    let (n, d) = (sample.n(), sample.d());
    if d_out == 0 || d_out > d {
        return Err(Error::Parameter(format!(
            "projection dimension {d_out} must lie in [1, {d}]"
        )));
    }
    if n <= d_out {
        return Err(Error::Parameter(format!(
            "need more than {d_out} sample descriptors, got {n}"
        )));
    }
    let mut mean = vec![0.0f64; d];
    for r in sample.rows() {
        mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| sample.row(i)[j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let top = linalg::dense_top_eigen(cov, d);

    let lambda1 = top.values.first().copied().unwrap_or(0.0);
    let usable = top
        .values
        .iter()
        .take_while(|&&l| lambda1 > 0.0 && l > RANK_TOL * lambda1)
        .count();
    if usable < d_out {
        return Err(Error::RankDeficient {
            available: usable,
            requested: d_out,
        });
    }
    let mut basis = Vec::with_capacity(d * d_out);
    for j in 0..d_out {
        let mut col: Vec<f64> = top.vectors.column(j).iter().copied().collect();
        linalg::fix_sign(&mut col);
        basis.extend(col);
    }
    Ok(DescriptorProjection {
        mean,
        basis,
        d,
        d_out,
        source: source.to_string(),
        renormalize: true,
        eigenvalues: top.values[..d_out].to_vec(),
    })
}

pub fn project_descriptors(
    x: &DescriptorMatrix,
    proj: &DescriptorProjection,
) -> Result<DescriptorMatrix> {
    if x.d() != proj.d {
        return Err(Error::Parameter(format!(
            "descriptor dimension {} does not match projection input {}",
            x.d(),
            proj.d
        )));
    }
    let rows: Vec<Vec<f32>> = x
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let centered: Vec<f64> = r
                .iter()
                .zip(&proj.mean)
                .map(|(&v, m)| v as f64 - m)
                .collect();
            let projected: Vec<f64> = (0..proj.d_out)
                .map(|j| linalg::dot(&centered, proj.column(j)))
                .collect();
            if proj.renormalize {
                let mut out = Vec::with_capacity(proj.d_out);
                push_normalized(&mut out, &projected);
                out
            } else {
                projected.iter().map(|&v| v as f32).collect()
            }
        })
        .collect();
    Ok(DescriptorMatrix {
        image_id: x.image_id.clone(),
        channel: x.channel.clone(),
        d: proj.d_out,
        data: rows.concat(),
    })
}

/// Pools the rows of `sets` and draws at most `max_rows` of them without
/// replacement, keeping their original order. Deterministic for a seed.
pub fn sample_descriptors(
    sets: &[DescriptorMatrix],
    max_rows: usize,
    seed: u64,
) -> Result<DescriptorMatrix> {
    let d = sets
        .first()
        .map(|s| s.d())
        .ok_or_else(|| Error::Data("no descriptor sets to sample from".into()))?;
    if sets.iter().any(|s| s.d() != d) {
        return Err(Error::Data("descriptor sets differ in dimension".into()));
    }
    let total: usize = sets.iter().map(|s| s.n()).sum();
    let mut data = Vec::with_capacity(total.min(max_rows) * d);
    if total <= max_rows {
        for s in sets {
            data.extend_from_slice(s.data());
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, total, max_rows).into_vec();
        picked.sort_unstable();
        let mut offsets = Vec::with_capacity(sets.len());
        let mut acc = 0;
        for s in sets {
            offsets.push(acc);
            acc += s.n();
        }
        for i in picked {
            let set = offsets.partition_point(|&o| o <= i) - 1;
            data.extend_from_slice(sets[set].row(i - offsets[set]));
        }
    }
    DescriptorMatrix::new(d, data)
}

/// One descriptor channel, e.g. a measurement-region scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: String,
    /// Relative measurement-region scale parsed from labels like `r0.75`.
    pub scale: Option<f64>,
}

impl Channel {
    pub fn new(label: &str) -> Self {
        let scale = label.strip_prefix('r').and_then(|s| s.parse().ok());
        Channel {
            label: label.to_string(),
            scale,
        }
    }
}

/// Measurement-region labels in the default vocabulary order.
pub const DEFAULT_CHANNEL_ORDER: [&str; 5] = ["r0.50", "r0.75", "r1.00", "r1.25", "r1.50"];

/// Maps `(image, channel)` to a descriptor file.
///
/// Text format, one record per line: `image_id<TAB>channel<TAB>relative_path`.
/// Paths are relative to the manifest's directory. Blank lines and lines
/// starting with `#` are skipped.
#[derive(Debug, Clone, Default)]
pub struct ChannelManifest {
    pub channels: Vec<Channel>,
    pub images: Vec<String>,
    root: PathBuf,
    entries: HashMap<(String, String), PathBuf>,
}

impl ChannelManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut m = ChannelManifest {
            root: root.to_path_buf(),
            ..Default::default()
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, channel, rel] = fields[..] else {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            };
            m.insert(image, channel, PathBuf::from(rel)).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("manifest line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root)
    }

    /// Builds a manifest in memory; call [`ChannelManifest::validate`] once
    /// all records are inserted.
    pub fn new(root: &Path) -> Self {
        ChannelManifest {
            root: root.to_path_buf(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, image: &str, channel: &str, rel: PathBuf) -> Result<()> {
        if image.is_empty() || channel.is_empty() {
            return Err(Error::Data("empty image id or channel".into()));
        }
        let key = (image.to_string(), channel.to_string());
        if self.entries.contains_key(&key) {
            return Err(Error::Data(format!(
                "duplicate record for image {image} channel {channel}"
            )));
        }
        if !self.images.iter().any(|i| i == image) {
            self.images.push(image.to_string());
        }
        if !self.channels.iter().any(|c| c.label == channel) {
            self.channels.push(Channel::new(channel));
        }
        self.entries.insert(key, rel);
        Ok(())
    }

    /// Every image must have exactly one file per channel.
    pub fn validate(&self) -> Result<()> {
        for image in &self.images {
            for ch in &self.channels {
                if !self.entries.contains_key(&(image.clone(), ch.label.clone())) {
                    return Err(Error::Data(format!(
                        "manifest: image {image} has no file for channel {}",
                        ch.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_channel(&self, channel: &str) -> bool {
        self.channels.iter().any(|c| c.label == channel)
    }

    pub fn path_for(&self, image: &str, channel: &str) -> Result<PathBuf> {
        self.entries
            .get(&(image.to_string(), channel.to_string()))
            .map(|rel| self.root.join(rel))
            .ok_or_else(|| {
                Error::Data(format!("manifest: no file for image {image} channel {channel}"))
            })
    }

    pub fn load_descriptors(&self, image: &str, channel: &str) -> Result<DescriptorMatrix> {
        Ok(load_descriptors(&self.path_for(image, channel)?)?.with_ids(image, channel))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for image in &self.images {
            for ch in &self.channels {
                let rel = &self.entries[&(image.clone(), ch.label.clone())];
                out.push_str(&format!("{image}\t{}\t{}\n", ch.label, rel.display()));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
